//! Wasserstein critic and the gradient-penalty objective.
//!
//! The engine has no double backward, so critics build their input gradient
//! as an ordinary graph. For the residual critic that graph is the reverse
//! pass written out by hand: transposed convolutions with the same weights,
//! constant leaky-ReLU slopes, and the pooling adjoint. Differentiating the
//! penalty then only needs first-order reverse mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore, Scope, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub trait Critic {
    /// Per-sample scores `[B, 1]` for maps `[B, 1, H, W]`.
    fn score(&self, x: &Tensor) -> Tensor;

    /// Scores and `∂score_b/∂x_b` for every sample, the latter as a graph
    /// that stays differentiable in the critic's parameters.
    fn score_and_input_grad(&self, x: &Tensor) -> (Tensor, Tensor);
}

/// `D(x) = c`.
pub struct ConstCritic(pub f64);

impl Critic for ConstCritic {
    fn score(&self, x: &Tensor) -> Tensor {
        Tensor::full(&[x.shape()[0], 1], self.0)
    }

    fn score_and_input_grad(&self, x: &Tensor) -> (Tensor, Tensor) {
        (self.score(x), Tensor::zeros(x.shape()))
    }
}

/// `D(x) = ⟨w, x⟩ + b` over the flattened map.
pub struct LinearCritic {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LinearCritic {
    fn weight_tensor(&self, x: &Tensor) -> Tensor {
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        Tensor::from_vec(self.weight.clone(), &shape)
    }
}

impl Critic for LinearCritic {
    fn score(&self, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let axes: Vec<usize> = (1..x.shape().len()).collect();
        x.mul(&self.weight_tensor(x))
            .sum_keepdim(&axes)
            .reshape(&[b, 1])
            .add_scalar(self.bias)
    }

    fn score_and_input_grad(&self, x: &Tensor) -> (Tensor, Tensor) {
        let g = self.weight_tensor(x).mul(&Tensor::full(x.shape(), 1.0));
        (self.score(x), g)
    }
}

#[derive(Debug, Clone)]
struct CriticBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

/// Residual critic with one input head per ladder level, average-pool
/// downsampling to the base resolution, a global mean and a linear score.
#[derive(Debug, Clone)]
pub struct ResCritic {
    channels: Vec<usize>,
    from_depth: Vec<Conv2d>,
    blocks: Vec<Option<CriticBlock>>,
    head: Linear,
}

impl ResCritic {
    /// `channels` are widths per ladder level, coarsest first.
    pub fn new(channels: &[usize]) -> Self {
        let n = channels.len();
        ResCritic {
            channels: channels.to_vec(),
            from_depth: (0..n)
                .map(|k| Conv2d::new(format!("level{k}.from_depth"), 1, channels[k], 1, 1))
                .collect(),
            blocks: (0..n)
                .map(|k| {
                    (k > 0).then(|| CriticBlock {
                        conv1: Conv2d::new(format!("level{k}.conv1"), channels[k], channels[k], 3, 1),
                        conv2: Conv2d::new(format!("level{k}.conv2"), channels[k], channels[k - 1], 3, 1),
                        skip: (channels[k] != channels[k - 1]).then(|| {
                            Conv2d::new(format!("level{k}.skip"), channels[k], channels[k - 1], 1, 1)
                        }),
                    })
                })
                .collect(),
            head: Linear::new("head", channels[0], 1),
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for c in &self.from_depth {
            c.init(&mut store, rng);
        }
        for b in self.blocks.iter().flatten() {
            b.conv1.init(&mut store, rng);
            b.conv2.init_with_gain(&mut store, rng, 0.5);
            if let Some(s) = &b.skip {
                s.init(&mut store, rng);
            }
        }
        self.head.init(&mut store, rng);
        store
    }

    /// Critic for maps at ladder level `level`.
    pub fn bind<'a>(&'a self, scope: Scope<'a>, level: usize) -> Result<BoundCritic<'a>> {
        if level >= self.levels() {
            return Err(Error::domain(format!("critic has no level {level}")));
        }
        Ok(BoundCritic {
            critic: self,
            scope,
            level,
        })
    }
}

pub struct BoundCritic<'a> {
    critic: &'a ResCritic,
    scope: Scope<'a>,
    level: usize,
}

fn slope_mask(pre: &Tensor) -> Tensor {
    let data = pre.data().iter().map(|&v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE }).collect();
    Tensor::from_vec(data, pre.shape())
}

struct BlockTape {
    pre1: Tensor,
    pre_out: Tensor,
    hw: (usize, usize),
}

impl BoundCritic<'_> {
    fn forward(&self, x: &Tensor) -> (Tensor, Tensor, Vec<BlockTape>, Tensor) {
        let c = self.critic;
        let s = &self.scope;
        let pre0 = c.from_depth[self.level].forward(s, x);
        let mut a = pre0.leaky_relu(LEAKY_SLOPE);
        let mut tape = Vec::new();
        for k in (1..=self.level).rev() {
            let b = c.blocks[k].as_ref().expect("levels above 0 have blocks");
            let (_, _, h, w) = a.dims4();
            let pre1 = b.conv1.forward(s, &a);
            let q1 = pre1.leaky_relu(LEAKY_SLOPE);
            let p2 = b.conv2.forward(s, &q1);
            let id = match &b.skip {
                Some(sk) => sk.forward(s, &a),
                None => a.clone(),
            };
            let pre_out = p2.add(&id);
            a = pre_out.leaky_relu(LEAKY_SLOPE).avg_pool2();
            tape.push(BlockTape {
                pre1,
                pre_out,
                hw: (h, w),
            });
        }
        let (bsz, ch, _, _) = a.dims4();
        let feat = a.mean_keepdim(&[2, 3]).reshape(&[bsz, ch]);
        let score = c.head.forward(s, &feat);
        (score, pre0, tape, a)
    }
}

impl Critic for BoundCritic<'_> {
    fn score(&self, x: &Tensor) -> Tensor {
        self.forward(x).0
    }

    fn score_and_input_grad(&self, x: &Tensor) -> (Tensor, Tensor) {
        let c = self.critic;
        let s = &self.scope;
        let (score, pre0, tape, last) = self.forward(x);
        let (bsz, ch, h0, w0) = last.dims4();
        let w_head = s.get(&format!("{}.weight", c.head.name)).reshape(&[1, ch, 1, 1]);
        let mut g = w_head
            .mul(&Tensor::full(&[bsz, ch, h0, w0], 1.0))
            .scale(1.0 / (h0 * w0) as f64);
        for (k, t) in (1..=self.level).zip(tape.iter().rev()) {
            let b = c.blocks[k].as_ref().expect("levels above 0 have blocks");
            let g_r = g.upsample2().scale(0.25).mul(&slope_mask(&t.pre_out));
            let w2 = s.get(&format!("{}.weight", b.conv2.name));
            let w1 = s.get(&format!("{}.weight", b.conv1.name));
            let g_p1 = g_r.conv2d_adjoint(&w2, 1, 1, t.hw).mul(&slope_mask(&t.pre1));
            let g_main = g_p1.conv2d_adjoint(&w1, 1, 1, t.hw);
            let g_skip = match &b.skip {
                Some(sk) => g_r.conv2d_adjoint(&s.get(&format!("{}.weight", sk.name)), 1, 0, t.hw),
                None => g_r,
            };
            g = g_main.add(&g_skip);
        }
        let (_, _, h, w) = x.dims4();
        let w0t = s.get(&format!("{}.weight", c.from_depth[self.level].name));
        let gx = g.mul(&slope_mask(&pre0)).conv2d_adjoint(&w0t, 1, 0, (h, w));
        (score, gx)
    }
}

/// Mean over interpolates `u·real + (1−u)·fake` of `(‖∇D‖₂ − 1)²`, with one
/// `u ~ U(0,1)` per sample.
pub fn gradient_penalty(d: &dyn Critic, real: &Tensor, fake: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::domain(format!(
            "real {:?} and fake {:?} batches differ",
            real.shape(),
            fake.shape()
        )));
    }
    let b = real.shape()[0];
    let mut ushape = vec![1; real.shape().len()];
    ushape[0] = b;
    let u: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let u = Tensor::from_vec(u, &ushape);
    let xhat = real.mul(&u).add(&fake.mul(&u.affine(-1.0, 1.0)));
    let (_, g) = d.score_and_input_grad(&xhat);
    let axes: Vec<usize> = (1..g.shape().len()).collect();
    let sq = g.sqr().sum_keepdim(&axes).reshape(&[b]);
    // sqrt has no derivative at 0; route exact zeros around it
    let zero: Vec<bool> = sq.data().iter().map(|&v| v == 0.0).collect();
    let safe = Tensor::select(&zero, &Tensor::full(&[b], 1.0), &sq);
    let norm = Tensor::select(&zero, &Tensor::zeros(&[b]), &safe.sqrt());
    Ok(norm.add_scalar(-1.0).sqr().mean_all())
}

/// The pieces of the critic and generator objectives.
pub struct WganTerms {
    /// `E[D(real)]`
    pub real: Tensor,
    /// `E[D(fake)]`
    pub fake: Tensor,
    pub gp: Tensor,
    /// `E[D(fake)] − E[D(real)] + γ·GP`
    pub loss_d: Tensor,
    /// `−E[D(fake)]`
    pub loss_g: Tensor,
}

impl WganTerms {
    pub fn wasserstein_gap(&self) -> f64 {
        self.real.item() - self.fake.item()
    }
}

pub fn wgan_losses(
    d: &dyn Critic,
    real: &Tensor,
    fake: &Tensor,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<WganTerms> {
    let er = d.score(real).mean_all();
    let ef = d.score(fake).mean_all();
    let gp = gradient_penalty(d, real, fake, rng)?;
    let loss_d = ef.sub(&er).add(&gp.scale(gamma));
    let loss_g = ef.neg();
    Ok(WganTerms {
        real: er,
        fake: ef,
        gp,
        loss_d,
        loss_g,
    })
}
