//! A small reverse-mode autodiff engine over contiguous f64 buffers.
//!
//! Tensors are immutable graph nodes. Leaves created with [`Tensor::var`]
//! track gradients; everything else is a constant unless one of its inputs
//! tracks gradients. [`Tensor::backward`] returns the gradients of a scalar
//! with respect to every tracked leaf that contributed to it.
//!
//! Shape errors inside the engine are programming errors and panic; callers
//! validate user-facing shapes before building graphs.

pub(crate) mod kernels;

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use kernels::{ConvGeom, Sample};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Sqr,
    Recip,
    LeakyRelu(f64),
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Minimum(Tensor, Tensor),
    Unary(Tensor, Unary),
    Affine(Tensor, f64),
    Clamp(Tensor, f64, f64),
    Select(Arc<Vec<bool>>, Tensor, Tensor),
    Sum(Tensor),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    Narrow(Tensor, usize, usize),
    MatMul(Tensor, Tensor, bool, bool),
    Conv(Tensor, Tensor, ConvGeom),
    ConvAdjoint(Tensor, Tensor, ConvGeom),
    AvgPool2(Tensor),
    Upsample2(Tensor),
    Resize(Tensor),
    InstanceNorm(Tensor, Vec<f64>, Vec<f64>),
    BilinearSample(Tensor, Tensor, Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Select(_, a, b)
            | Op::MatMul(a, b, _, _)
            | Op::Conv(a, b, _)
            | Op::ConvAdjoint(a, b, _) => vec![a, b],
            Op::Unary(a, _)
            | Op::Affine(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Narrow(a, _, _)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::Resize(a)
            | Op::InstanceNorm(a, _, _) => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::BilinearSample(a, b, c) => vec![a, b, c],
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `shape` aligned to `out` rank, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index together with the matching offsets in two
/// broadcast inputs.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < n {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of shape `out` down to the broadcast input `shape`.
fn reduce_to(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    if out == shape {
        return grad.to_vec();
    }
    let s = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut r = vec![0.0; numel(shape)];
    for_each_broadcast(out, &s, &zeros, |o, a, _| r[a] += grad[o]);
    r
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: Arc::new(data),
            op,
            requires_grad,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "data length {} does not match shape {shape:?}",
            data.len()
        );
        Tensor::make(shape.to_vec(), data, Op::Leaf)
    }

    /// Constant tensor sharing an existing buffer.
    pub fn from_shared(data: Arc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Tensor {
        assert_eq!(numel(shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            op: Op::Leaf,
            requires_grad,
        }))
    }

    /// Gradient-tracking leaf.
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_shared(Arc::new(data), shape, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; numel(shape)], shape)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.0.shape[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => panic!("expected a rank-4 tensor, got {:?}", self.0.shape),
        }
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn shared_data(&self) -> Arc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Tensor {
        Tensor::from_shared(self.0.data.clone(), &self.0.shape, false)
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64, op: Op) -> Tensor {
        let (a, b) = (self.data(), rhs.data());
        if self.shape() == rhs.shape() {
            let data = a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::make(self.shape().to_vec(), data, op);
        }
        let out = broadcast_shape(self.shape(), rhs.shape());
        let sa = broadcast_strides(self.shape(), &out);
        let sb = broadcast_strides(rhs.shape(), &out);
        let mut data = vec![0.0; numel(&out)];
        for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(a[i], b[j]));
        Tensor::make(out, data, op)
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |x, y| x + y, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |x, y| x - y, Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |x, y| x * y, Op::Mul(self.clone(), rhs.clone()))
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |x, y| x / y, Op::Div(self.clone(), rhs.clone()))
    }

    /// Elementwise minimum of two equally shaped tensors; ties go to `self`.
    pub fn minimum(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape());
        self.binary(rhs, f64::min, Op::Minimum(self.clone(), rhs.clone()))
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&self, kind: Unary) -> Tensor {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => f64::tanh,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Sqr => |x| x * x,
            Unary::Recip => |x| 1.0 / x,
            Unary::LeakyRelu(_) => |x| x,
        };
        let data = match kind {
            Unary::LeakyRelu(a) => self
                .data()
                .iter()
                .map(|&x| if x > 0.0 { x } else { a * x })
                .collect(),
            _ => self.data().iter().map(|&x| f(x)).collect(),
        };
        Tensor::make(self.shape().to_vec(), data, Op::Unary(self.clone(), kind))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(Unary::Exp)
    }
    pub fn log(&self) -> Tensor {
        self.unary(Unary::Log)
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(Unary::Sqrt)
    }
    pub fn sigmoid(&self) -> Tensor {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(&self) -> Tensor {
        self.unary(Unary::Tanh)
    }
    pub fn sin(&self) -> Tensor {
        self.unary(Unary::Sin)
    }
    pub fn cos(&self) -> Tensor {
        self.unary(Unary::Cos)
    }
    pub fn sqr(&self) -> Tensor {
        self.unary(Unary::Sqr)
    }
    pub fn recip(&self) -> Tensor {
        self.unary(Unary::Recip)
    }
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(Unary::LeakyRelu(slope))
    }

    /// `scale · x + shift`
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let data = self.data().iter().map(|&x| scale * x + shift).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Affine(self.clone(), scale))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.affine(1.0, s)
    }

    /// Clamp with gradient passing where `lo ≤ x ≤ hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Clamp(self.clone(), lo, hi))
    }

    /// `mask ? a : b` for equally shaped tensors.
    pub fn select(mask: &[bool], a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(mask.len(), a.numel());
        let data = mask
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        Tensor::make(
            a.shape().to_vec(),
            data,
            Op::Select(Arc::new(mask.to_vec()), a.clone(), b.clone()),
        )
    }

    // ---- reductions and shape ---------------------------------------------

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut out = self.shape().to_vec();
        for &a in axes {
            out[a] = 1;
        }
        let data = reduce_to(self.data(), self.shape(), &out);
        Tensor::make(out, data, Op::Sum(self.clone()))
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdim(axes).scale(1.0 / n as f64)
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_keepdim(&axes).reshape(&[])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} to {shape:?}",
            self.shape()
        );
        let node = Node {
            id: next_id(),
            shape: shape.to_vec(),
            data: self.0.data.clone(),
            op: if self.requires_grad() {
                Op::Reshape(self.clone())
            } else {
                Op::Leaf
            },
            requires_grad: self.requires_grad(),
        };
        Tensor(Rc::new(node))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let mut out = first.to_vec();
        out[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        for p in parts {
            for (d, (&x, &y)) in p.shape().iter().zip(first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {:?}", p.shape());
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::make(out, data, Op::Concat(parts.to_vec(), axis))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = shape.to_vec();
        out[axis] = len;
        let mut data = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::make(out, data, Op::Narrow(self.clone(), axis, start))
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D matrix product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&self, rhs: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (am, ak) = mat_dims(self.shape(), ta);
        let (bk, bn) = mat_dims(rhs.shape(), tb);
        assert_eq!(ak, bk, "matmul inner dims {:?} x {:?}", self.shape(), rhs.shape());
        let mut c = vec![0.0; am * bn];
        let (rsa, csa) = mat_strides(self.shape(), ta);
        let (rsb, csb) = mat_strides(rhs.shape(), tb);
        kernels::gemm(am, ak, bn, self.data(), rsa, csa, rhs.data(), rsb, csb, 0.0, &mut c);
        Tensor::make(vec![am, bn], c, Op::MatMul(self.clone(), rhs.clone(), ta, tb))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.matmul_t(rhs, false, false)
    }

    // ---- convolutions ------------------------------------------------------

    fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> ConvGeom {
        let (b, ci, h, wd) = (x[0], x[1], x[2], x[3]);
        assert_eq!(w.len(), 4);
        assert_eq!(w[1], ci, "conv weight {w:?} vs input {x:?}");
        assert_eq!(w[2], w[3], "square kernels only");
        let k = w[2];
        ConvGeom {
            batch: b,
            c_in: ci,
            h,
            w: wd,
            c_out: w[0],
            k,
            stride,
            pad,
            ho: kernels::conv_out_size(h, k, stride, pad),
            wo: kernels::conv_out_size(wd, k, stride, pad),
        }
    }

    /// Cross-correlation of NCHW input with an `[out, in, k, k]` kernel.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.shape().len(), 4);
        let g = Tensor::conv_geom(self.shape(), weight.shape(), stride, pad);
        let y = kernels::conv2d(self.data(), weight.data(), &g);
        Tensor::make(
            vec![g.batch, g.c_out, g.ho, g.wo],
            y,
            Op::Conv(self.clone(), weight.clone(), g),
        )
    }

    /// Input-adjoint of [`Tensor::conv2d`]: with `weight` shaped
    /// `[c_self, c_out, k, k]` this is the transposed convolution producing an
    /// `out_hw` map. `conv_transpose2d(x, w, 2, 1, 2h, 2w)` with a 4×4 kernel
    /// doubles the resolution.
    pub fn conv2d_adjoint(
        &self,
        weight: &Tensor,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Tensor {
        let (b, c, ho, wo) = self.dims4();
        let ws = weight.shape();
        assert_eq!(ws[0], c, "adjoint weight {ws:?} vs input {:?}", self.shape());
        let g = Tensor::conv_geom(&[b, ws[1], out_hw.0, out_hw.1], ws, stride, pad);
        assert_eq!((g.ho, g.wo), (ho, wo), "adjoint output size inconsistent");
        let x = kernels::conv2d_adjoint(self.data(), weight.data(), &g);
        Tensor::make(
            vec![b, g.c_in, g.h, g.w],
            x,
            Op::ConvAdjoint(self.clone(), weight.clone(), g),
        )
    }

    // ---- spatial -----------------------------------------------------------

    pub fn avg_pool2(&self) -> Tensor {
        let (b, c, h, w) = self.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let y = kernels::avg_pool2(self.data(), b * c, h, w);
        Tensor::make(vec![b, c, h / 2, w / 2], y, Op::AvgPool2(self.clone()))
    }

    pub fn upsample2(&self) -> Tensor {
        let (b, c, h, w) = self.dims4();
        let y = kernels::upsample2(self.data(), b * c, h, w, 1.0);
        Tensor::make(vec![b, c, 2 * h, 2 * w], y, Op::Upsample2(self.clone()))
    }

    /// Bilinear resize with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&self, ho: usize, wo: usize) -> Tensor {
        let (b, c, h, w) = self.dims4();
        if (h, w) == (ho, wo) {
            return self.clone();
        }
        let y = kernels::resize_bilinear(self.data(), b * c, (h, w), (ho, wo));
        Tensor::make(vec![b, c, ho, wo], y, Op::Resize(self.clone()))
    }

    /// Per-(sample, channel) normalization over the spatial axes.
    pub fn instance_norm(&self, eps: f64) -> Tensor {
        let (b, c, h, w) = self.dims4();
        let n = h * w;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; b * c];
        for p in 0..b * c {
            let x = &self.data()[p * n..(p + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for (o, v) in xhat[p * n..(p + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
        }
        let data = xhat.clone();
        Tensor::make(
            self.shape().to_vec(),
            data,
            Op::InstanceNorm(self.clone(), xhat, inv_std),
        )
    }

    /// Samples `src` (`[B,C,H,W]`) at pixel coordinates `u`, `v`
    /// (`[B,1,Ho,Wo]`) with bilinear interpolation and zero padding.
    pub fn bilinear_sample(src: &Tensor, u: &Tensor, v: &Tensor) -> Tensor {
        let (b, c, h, w) = src.dims4();
        let (ub, uc, ho, wo) = u.dims4();
        assert_eq!((ub, uc), (b, 1));
        assert_eq!(u.shape(), v.shape());
        let n = ho * wo;
        let mut out = vec![0.0; b * c * n];
        for bi in 0..b {
            for p in 0..n {
                let Some(s) = Sample::new(u.data()[bi * n + p], v.data()[bi * n + p]) else {
                    continue;
                };
                let wts = s.weights();
                for ci in 0..c {
                    let plane = &src.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let cs = s.corners(plane, h, w);
                    out[(bi * c + ci) * n + p] =
                        cs[0] * wts[0] + cs[1] * wts[1] + cs[2] * wts[2] + cs[3] * wts[3];
                }
            }
        }
        Tensor::make(
            vec![b, c, ho, wo],
            out,
            Op::BilinearSample(src.clone(), u.clone(), v.clone()),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of this scalar with respect to every tracked leaf.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar, got {:?}", self.shape());
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                grads.0.insert(node.id(), g);
                continue;
            }
            node.propagate(&g, &mut pending);
        }
        grads
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], pending: &mut HashMap<u64, Vec<f64>>) {
        let out_shape = self.shape();
        let mut send = |t: &Tensor, grad: Vec<f64>| {
            if !t.requires_grad() {
                return;
            }
            debug_assert_eq!(grad.len(), t.numel());
            match pending.entry(t.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&grad) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(grad);
                }
            }
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if a.requires_grad() {
                    send(a, reduce_to(g, out_shape, a.shape()));
                }
                if b.requires_grad() {
                    send(b, reduce_to(g, out_shape, b.shape()));
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    send(a, reduce_to(g, out_shape, a.shape()));
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    send(b, reduce_to(&neg, out_shape, b.shape()));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.0.op, Op::Div(..));
                let sa = broadcast_strides(a.shape(), out_shape);
                let sb = broadcast_strides(b.shape(), out_shape);
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    let mut ga = vec![0.0; a.numel()];
                    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        ga[i] += if is_div { g[o] / bd[j] } else { g[o] * bd[j] };
                    });
                    send(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; b.numel()];
                    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        gb[j] += if is_div {
                            -g[o] * ad[i] / (bd[j] * bd[j])
                        } else {
                            g[o] * ad[i]
                        };
                    });
                    send(b, gb);
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    let ga = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 })
                        .collect();
                    send(a, ga);
                }
                if b.requires_grad() {
                    let gb = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv })
                        .collect();
                    send(b, gb);
                }
            }
            Op::Unary(a, kind) => {
                let (x, y) = (a.data(), self.data());
                let d: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let gv = g[i];
                        match kind {
                            Unary::Neg => -gv,
                            Unary::Exp => gv * y[i],
                            Unary::Log => gv / x[i],
                            Unary::Sqrt => gv * 0.5 / y[i],
                            Unary::Sigmoid => gv * y[i] * (1.0 - y[i]),
                            Unary::Tanh => gv * (1.0 - y[i] * y[i]),
                            Unary::Sin => gv * x[i].cos(),
                            Unary::Cos => -gv * x[i].sin(),
                            Unary::Sqr => 2.0 * gv * x[i],
                            Unary::Recip => -gv * y[i] * y[i],
                            Unary::LeakyRelu(s) => {
                                if x[i] > 0.0 {
                                    gv
                                } else {
                                    s * gv
                                }
                            }
                        }
                    })
                    .collect();
                send(a, d);
            }
            Op::Affine(a, s) => send(a, g.iter().map(|v| v * s).collect()),
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .iter()
                    .zip(a.data())
                    .map(|(gv, x)| if *x >= *lo && *x <= *hi { *gv } else { 0.0 })
                    .collect();
                send(a, d);
            }
            Op::Select(mask, a, b) => {
                if a.requires_grad() {
                    send(
                        a,
                        g.iter().zip(mask.iter()).map(|(v, &m)| if m { *v } else { 0.0 }).collect(),
                    );
                }
                if b.requires_grad() {
                    send(
                        b,
                        g.iter().zip(mask.iter()).map(|(v, &m)| if m { 0.0 } else { *v }).collect(),
                    );
                }
            }
            Op::Sum(a) => {
                let s = broadcast_strides(out_shape, a.shape());
                let zeros = vec![0; a.shape().len()];
                let mut d = vec![0.0; a.numel()];
                for_each_broadcast(a.shape(), &s, &zeros, |o, i, _| d[o] = g[i]);
                send(a, d);
            }
            Op::Reshape(a) => send(a, g.to_vec()),
            Op::Concat(parts, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = p.shape()[*axis] * inner;
                    if p.requires_grad() {
                        let mut d = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        send(p, d);
                    }
                    offset += chunk;
                }
            }
            Op::Narrow(a, axis, start) => {
                let shape = a.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut d = vec![0.0; a.numel()];
                for o in 0..outer {
                    let base = o * shape[*axis] * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(a, d);
            }
            Op::MatMul(a, b, ta, tb) => {
                let (m, k) = mat_dims(a.shape(), *ta);
                let (_, n) = mat_dims(b.shape(), *tb);
                if a.requires_grad() {
                    // dop(a)[m×k] = g[m×n] · op(b)ᵀ ; stored transposed if ta
                    let (rsb, csb) = mat_strides(b.shape(), *tb);
                    let mut d = vec![0.0; m * k];
                    if *ta {
                        // da[k×m] = op(b)[k×n] · gᵀ[n×m]
                        kernels::gemm(k, n, m, b.data(), rsb, csb, g, 1, n as isize, 0.0, &mut d);
                    } else {
                        kernels::gemm(m, n, k, g, n as isize, 1, b.data(), csb, rsb, 0.0, &mut d);
                    }
                    send(a, d);
                }
                if b.requires_grad() {
                    let (rsa, csa) = mat_strides(a.shape(), *ta);
                    let mut d = vec![0.0; k * n];
                    if *tb {
                        // db[n×k] = gᵀ[n×m] · op(a)[m×k]
                        kernels::gemm(n, m, k, g, 1, n as isize, a.data(), rsa, csa, 0.0, &mut d);
                    } else {
                        kernels::gemm(k, m, n, a.data(), csa, rsa, g, n as isize, 1, 0.0, &mut d);
                    }
                    send(b, d);
                }
            }
            Op::Conv(x, w, geom) => {
                if x.requires_grad() {
                    send(x, kernels::conv2d_adjoint(g, w.data(), geom));
                }
                if w.requires_grad() {
                    send(w, kernels::conv2d_weight_grad(x.data(), g, geom));
                }
            }
            Op::ConvAdjoint(y, w, geom) => {
                // self = A(y, w); dL/dy = conv(g, w); dL/dw = weight_grad(g, y)
                if y.requires_grad() {
                    send(y, kernels::conv2d(g, w.data(), geom));
                }
                if w.requires_grad() {
                    send(w, kernels::conv2d_weight_grad(g, y.data(), geom));
                }
            }
            Op::AvgPool2(a) => {
                let (b, c, h, w) = a.dims4();
                send(a, kernels::upsample2(g, b * c, h / 2, w / 2, 0.25));
            }
            Op::Upsample2(a) => {
                let (b, c, h, w) = a.dims4();
                send(a, kernels::sum_pool2(g, b * c, 2 * h, 2 * w));
            }
            Op::Resize(a) => {
                let (b, c, h, w) = a.dims4();
                let (_, _, ho, wo) = self.dims4();
                send(a, kernels::resize_bilinear_adjoint(g, b * c, (h, w), (ho, wo)));
            }
            Op::InstanceNorm(a, xhat, inv_std) => {
                let (b, c, h, w) = a.dims4();
                let n = h * w;
                let mut d = vec![0.0; a.numel()];
                for p in 0..b * c {
                    let gs = &g[p * n..(p + 1) * n];
                    let xs = &xhat[p * n..(p + 1) * n];
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    let k = inv_std[p] / n as f64;
                    for i in 0..n {
                        d[p * n + i] = k * (n as f64 * gs[i] - sum_g - xs[i] * sum_gx);
                    }
                }
                send(a, d);
            }
            Op::BilinearSample(src, u, v) => {
                let (b, c, h, w) = src.dims4();
                let (_, _, ho, wo) = u.dims4();
                let n = ho * wo;
                let mut du = vec![0.0; b * n];
                let mut dv = vec![0.0; b * n];
                let mut dsrc = if src.requires_grad() {
                    Some(vec![0.0; src.numel()])
                } else {
                    None
                };
                for bi in 0..b {
                    for p in 0..n {
                        let Some(s) = Sample::new(u.data()[bi * n + p], v.data()[bi * n + p])
                        else {
                            continue;
                        };
                        let wts = s.weights();
                        for ci in 0..c {
                            let gv = g[(bi * c + ci) * n + p];
                            if gv == 0.0 {
                                continue;
                            }
                            let off = (bi * c + ci) * h * w;
                            let plane = &src.data()[off..off + h * w];
                            let cs = s.corners(plane, h, w);
                            du[bi * n + p] +=
                                gv * ((1.0 - s.ay) * (cs[1] - cs[0]) + s.ay * (cs[3] - cs[2]));
                            dv[bi * n + p] +=
                                gv * ((1.0 - s.ax) * (cs[2] - cs[0]) + s.ax * (cs[3] - cs[1]));
                            if let Some(ds) = dsrc.as_mut() {
                                let taps = [
                                    (s.x0, s.y0),
                                    (s.x0 + 1, s.y0),
                                    (s.x0, s.y0 + 1),
                                    (s.x0 + 1, s.y0 + 1),
                                ];
                                for ((x, y), wt) in taps.into_iter().zip(wts) {
                                    if x >= 0 && y >= 0 && x < w as isize && y < h as isize {
                                        ds[off + y as usize * w + x as usize] += gv * wt;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(ds) = dsrc {
                    send(src, ds);
                }
                send(u, du);
                send(v, dv);
            }
        }
    }
}

fn mat_dims(shape: &[usize], t: bool) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "matmul expects 2-D operands, got {shape:?}");
    if t {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

/// (row stride, col stride) of `op(x)` for a row-major 2-D buffer.
fn mat_strides(shape: &[usize], t: bool) -> (isize, isize) {
    let cols = shape[1] as isize;
    if t {
        (1, cols)
    } else {
        (cols, 1)
    }
}

/// Leaf gradients keyed by tensor id.
#[derive(Default, Debug)]
pub struct Gradients(HashMap<u64, Vec<f64>>);

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.0.get(&t.id()).map(Vec::as_slice)
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.0.remove(&t.id())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(f)/d(leaf) for every element.
    fn check_grad(shape: &[usize], init: Vec<f64>, f: impl Fn(&Tensor) -> Tensor) {
        let x = Tensor::var(init.clone(), shape);
        let y = f(&x);
        let g = y.backward().get(&x).map(<[f64]>::to_vec).unwrap_or(vec![0.0; init.len()]);
        let h = 1e-6;
        for i in 0..init.len() {
            let mut p = init.clone();
            p[i] += h;
            let mut m = init.clone();
            m[i] -= h;
            let fp = f(&Tensor::from_vec(p, shape)).item();
            let fm = f(&Tensor::from_vec(m, shape)).item();
            let fd = (fp - fm) / (2.0 * h);
            let tol = 1e-6 * fd.abs().max(1.0);
            assert!((fd - g[i]).abs() < tol, "elem {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    fn vals(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * 0.713 + seed).sin()).collect()
    }

    #[test]
    fn broadcast_arithmetic_gradients() {
        let other = Tensor::from_vec(vals(3, 0.5), &[1, 3, 1]);
        check_grad(&[2, 3, 4], vals(24, 0.1), |x| x.mul(&other).add(&other).div(&other.add_scalar(3.0)).sum_all());
        let big = Tensor::from_vec(vals(24, 0.2), &[2, 3, 4]);
        check_grad(&[1, 3, 1], vals(3, 0.3), |x| big.sub(x).mul(x).div(&x.add_scalar(2.5)).sum_all());
    }

    #[test]
    fn unary_gradients() {
        check_grad(&[5], vec![0.3, 0.7, 1.2, 2.0, 0.9], |x| {
            x.exp()
                .add(&x.log())
                .add(&x.sqrt())
                .add(&x.sigmoid())
                .add(&x.tanh())
                .add(&x.sin())
                .add(&x.cos())
                .add(&x.sqr())
                .add(&x.recip())
                .add(&x.neg())
                .sum_all()
        });
        check_grad(&[4], vec![-0.5, 0.3, -1.2, 0.8], |x| x.leaky_relu(0.2).sqr().sum_all());
        check_grad(&[4], vec![-0.5, 0.3, -1.2, 0.8], |x| x.clamp(-1.0, 0.5).sqr().sum_all());
    }

    #[test]
    fn matmul_gradients_all_transposes() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [4, 3] } else { [3, 4] };
            let b_shape = if tb { [2, 4] } else { [4, 2] };
            let b = Tensor::from_vec(vals(8, 0.9), &b_shape);
            check_grad(&a_shape, vals(12, 0.4), |x| x.matmul_t(&b, ta, tb).sqr().sum_all());
            let a = Tensor::from_vec(vals(12, 0.4), &a_shape);
            check_grad(&b_shape, vals(8, 0.9), |x| a.matmul_t(x, ta, tb).sqr().sum_all());
        }
    }

    #[test]
    fn conv_and_adjoint_gradients() {
        let w = Tensor::from_vec(vals(4 * 2 * 9, 0.2), &[4, 2, 3, 3]);
        check_grad(&[1, 2, 5, 5], vals(50, 0.6), |x| x.conv2d(&w, 2, 1).sqr().sum_all());
        let x = Tensor::from_vec(vals(50, 0.6), &[1, 2, 5, 5]);
        check_grad(&[4, 2, 3, 3], vals(72, 0.2), |w| x.conv2d(w, 1, 1).sqr().sum_all());
        let wt = Tensor::from_vec(vals(3 * 2 * 16, 0.5), &[3, 2, 4, 4]);
        check_grad(&[1, 3, 3, 3], vals(27, 0.7), |y| y.conv2d_adjoint(&wt, 2, 1, (6, 6)).sqr().sum_all());
        let y = Tensor::from_vec(vals(27, 0.7), &[1, 3, 3, 3]);
        check_grad(&[3, 2, 4, 4], vals(96, 0.5), |w| y.conv2d_adjoint(w, 2, 1, (6, 6)).sqr().sum_all());
    }

    #[test]
    fn spatial_gradients() {
        check_grad(&[1, 2, 4, 4], vals(32, 0.3), |x| x.avg_pool2().sqr().sum_all());
        check_grad(&[1, 2, 2, 3], vals(12, 0.3), |x| x.upsample2().sqr().sum_all());
        check_grad(&[1, 1, 3, 4], vals(12, 0.8), |x| x.resize_bilinear(7, 5).sqr().sum_all());
        let r = Tensor::from_vec(vals(18, 1.3), &[1, 2, 3, 3]);
        check_grad(&[1, 2, 3, 3], vals(18, 0.1), |x| x.instance_norm(1e-5).mul(&r).sum_all());
    }

    #[test]
    fn shape_op_gradients() {
        let r = Tensor::from_vec(vals(30, 0.9), &[2, 5, 3]);
        check_grad(&[2, 2, 3], vals(12, 0.4), |x| {
            let other = Tensor::from_vec(vals(18, 0.2), &[2, 3, 3]);
            Tensor::concat(&[x.clone(), other], 1).mul(&r).sum_all()
        });
        check_grad(&[2, 5, 3], vals(30, 0.4), |x| x.narrow(1, 1, 3).sqr().sum_all());
        check_grad(&[2, 3], vals(6, 0.4), |x| x.reshape(&[3, 2]).mean_keepdim(&[1]).sqr().sum_all());
        let mask = [true, false, true, false];
        let b = Tensor::from_vec(vals(4, 2.0), &[4]);
        check_grad(&[4], vals(4, 0.1), |x| Tensor::select(&mask, x, &b.mul(x)).sqr().sum_all());
        check_grad(&[4], vals(4, 0.1), |x| x.minimum(&b).sqr().sum_all());
    }

    #[test]
    fn bilinear_sample_gradients() {
        let src = Tensor::from_vec(vals(2 * 16, 0.3), &[1, 2, 4, 4]);
        let v = Tensor::from_vec(vec![0.3, 1.7, 2.2, 0.6], &[1, 1, 2, 2]);
        check_grad(&[1, 1, 2, 2], vec![0.4, 2.6, 1.3, 3.4], |u| {
            Tensor::bilinear_sample(&src, u, &v).sqr().sum_all()
        });
        let u = Tensor::from_vec(vec![0.4, 2.6, 1.3, -0.4], &[1, 1, 2, 2]);
        check_grad(&[1, 1, 2, 2], vec![0.3, 1.7, 2.2, 0.6], |v| {
            Tensor::bilinear_sample(&src, &u, v).sqr().sum_all()
        });
        check_grad(&[1, 2, 4, 4], vals(32, 0.3), |s| {
            Tensor::bilinear_sample(s, &u, &v).sqr().sum_all()
        });
    }

    #[test]
    fn bilinear_sample_hits_pixels_exactly_and_zero_pads() {
        let src = Tensor::from_vec((0..12).map(f64::from).collect(), &[1, 1, 3, 4]);
        let u = Tensor::from_vec(vec![2.0, 3.0, -1.0, 10.0], &[1, 1, 2, 2]);
        let v = Tensor::from_vec(vec![1.0, 2.0, 0.0, 0.0], &[1, 1, 2, 2]);
        let s = Tensor::bilinear_sample(&src, &u, &v);
        assert_eq!(s.data(), &[6.0, 11.0, 0.0, 0.0]);
    }

    #[test]
    fn untracked_graphs_have_no_gradients() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]);
        assert!(x.sqr().sum_all().backward().is_empty());
    }
}
