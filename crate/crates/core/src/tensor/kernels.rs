//! Raw f64 kernels on contiguous NCHW buffers. No graph bookkeeping here.

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size `a`, `b` and `c` for the given strides and
    // extents; matrixmultiply reads/writes only inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let cols = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let cols = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// y[b, co] = Σ w[co, ci, ky, kx] · x[b, ci, oy*s-p+ky, ox*s-p+kx]
pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut y = vec![0.0; g.batch * g.c_out * cols];
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w], g, &mut col);
        let yb = &mut y[b * g.c_out * cols..(b + 1) * g.c_out * cols];
        gemm(
            g.c_out,
            rows,
            cols,
            w,
            rows as isize,
            1,
            &col,
            cols as isize,
            1,
            0.0,
            yb,
        );
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// buffer back onto the input grid.
pub(crate) fn conv2d_adjoint(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut x = vec![0.0; g.batch * g.c_in * g.h * g.w];
    for b in 0..g.batch {
        let gb = &gy[b * g.c_out * cols..(b + 1) * g.c_out * cols];
        // col = wᵀ · gb, w is [c_out × rows]
        gemm(
            rows,
            g.c_out,
            cols,
            w,
            1,
            rows as isize,
            gb,
            cols as isize,
            1,
            0.0,
            &mut col,
        );
        col2im_add(
            &col,
            g,
            &mut x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w],
        );
    }
    x
}

/// dW[co, ci, ky, kx] = Σ_b Σ_p gy[b, co, p] · col_b[(ci,ky,kx), p]
pub(crate) fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut dw = vec![0.0; g.c_out * rows];
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w], g, &mut col);
        let gb = &gy[b * g.c_out * cols..(b + 1) * g.c_out * cols];
        gemm(
            g.c_out,
            cols,
            rows,
            gb,
            cols as isize,
            1,
            &col,
            1,
            cols as isize,
            1.0,
            &mut dw,
        );
    }
    dw
}

pub(crate) fn avg_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    y
}

/// Nearest-neighbour ×2 upsampling scaled by `scale`.
pub(crate) fn upsample2(x: &[f64], planes: usize, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = scale * src[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

/// Sums each 2×2 block (the transpose of nearest ×2 upsampling).
pub(crate) fn sum_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut y = avg_pool2(x, planes, h, w);
    y.iter_mut().for_each(|v| *v *= 4.0);
    y
}

/// Interpolation taps along one axis for half-pixel-centre bilinear resizing.
#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f64>,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    let mut taps = Taps {
        i0: Vec::with_capacity(output),
        i1: Vec::with_capacity(output),
        w1: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        taps.i0.push(i0);
        taps.i1.push(i1);
        taps.w1.push(src - i0 as f64);
    }
    taps
}

pub(crate) fn resize_bilinear(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (r0, r1, wy) = (ty.i0[oy] * w, ty.i1[oy] * w, ty.w1[oy]);
            for ox in 0..wo {
                let (c0, c1, wx) = (tx.i0[ox], tx.i1[ox], tx.w1[ox]);
                let top = src[r0 + c0] * (1.0 - wx) + src[r0 + c1] * wx;
                let bot = src[r1 + c0] * (1.0 - wx) + src[r1 + c1] * wx;
                dst[oy * wo + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    y
}

pub(crate) fn resize_bilinear_adjoint(
    gy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &gy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (r0, r1, wy) = (ty.i0[oy] * w, ty.i1[oy] * w, ty.w1[oy]);
            for ox in 0..wo {
                let (c0, c1, wx) = (tx.i0[ox], tx.i1[ox], tx.w1[ox]);
                let g = src[oy * wo + ox];
                dst[r0 + c0] += g * (1.0 - wy) * (1.0 - wx);
                dst[r0 + c1] += g * (1.0 - wy) * wx;
                dst[r1 + c0] += g * wy * (1.0 - wx);
                dst[r1 + c1] += g * wy * wx;
            }
        }
    }
    gx
}

/// The four bilinear taps of a sample point; taps outside the image carry no
/// source value (zero padding).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Sample {
    pub x0: isize,
    pub y0: isize,
    pub ax: f64,
    pub ay: f64,
}

impl Sample {
    pub fn new(u: f64, v: f64) -> Option<Sample> {
        if !u.is_finite() || !v.is_finite() {
            return None;
        }
        // Far-off points contribute nothing; avoid isize overflow.
        if u.abs() > 1e9 || v.abs() > 1e9 {
            return None;
        }
        let (fu, fv) = (u.floor(), v.floor());
        Some(Sample {
            x0: fu as isize,
            y0: fv as isize,
            ax: u - fu,
            ay: v - fv,
        })
    }

    #[inline]
    pub fn tap(plane: &[f64], h: usize, w: usize, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    }

    #[inline]
    pub fn corners(&self, plane: &[f64], h: usize, w: usize) -> [f64; 4] {
        [
            Self::tap(plane, h, w, self.x0, self.y0),
            Self::tap(plane, h, w, self.x0 + 1, self.y0),
            Self::tap(plane, h, w, self.x0, self.y0 + 1),
            Self::tap(plane, h, w, self.x0 + 1, self.y0 + 1),
        ]
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ]
    }
}
