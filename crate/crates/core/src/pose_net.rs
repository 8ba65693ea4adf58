//! Pose encoder producing a Gaussian posterior over the relative pose, with
//! the KL regularizer toward a scaled standard-normal prior.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose6;
use crate::nn::{global_avg_pool, rng_from_seed, Conv2d, Linear, ParamStore, ResBlock, Scope, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 2.0;

/// Characteristic magnitudes dividing the pose parameters before the KL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    pub rotation_scale: f64,
    pub translation_scale: f64,
}

impl Default for PosePrior {
    fn default() -> Self {
        PosePrior {
            rotation_scale: 0.1,
            translation_scale: 1.0,
        }
    }
}

impl PosePrior {
    pub fn unit() -> Self {
        PosePrior {
            rotation_scale: 1.0,
            translation_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.rotation_scale) || !ok(self.translation_scale) {
            return Err(Error::Config("pose prior scales must be positive".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> [f64; 6] {
        let (r, t) = (self.rotation_scale, self.translation_scale);
        [r, r, r, t, t, t]
    }
}

/// Posterior over one relative pose. `mean` is in physical units; the log
/// variance is of the scaled parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub mean: [f64; 6],
    pub log_variance: [f64; 6],
    pub scale: [f64; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

impl PoseDistribution {
    pub fn new(mean: [f64; 6], log_variance: [f64; 6], prior: &PosePrior) -> Result<Self> {
        if mean.iter().chain(&log_variance).any(|v| v.is_nan()) {
            return Err(Error::domain("pose distribution has NaN entries"));
        }
        Ok(PoseDistribution {
            mean,
            log_variance: log_variance.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)),
            scale: prior.scales(),
        })
    }

    pub fn kl_to_prior(&self) -> f64 {
        let mut kl = 0.0;
        for j in 0..6 {
            let mu = self.mean[j] / self.scale[j];
            let lv = self.log_variance[j];
            kl += 0.5 * (lv.exp() + mu * mu - 1.0 - lv);
        }
        kl
    }

    /// Reparameterized draw in train mode, the mean in eval mode.
    pub fn sample(&self, mode: SampleMode, seed: u64) -> Pose6 {
        match mode {
            SampleMode::Eval => Pose6::from_array(self.mean),
            SampleMode::Train => {
                let mut rng = rng_from_seed(seed);
                Pose6::from_array(self.sample_with(&mut rng))
            }
        }
    }

    pub fn sample_with(&self, rng: &mut ChaCha8Rng) -> [f64; 6] {
        let mut out = [0.0; 6];
        for j in 0..6 {
            let eps: f64 = StandardNormal.sample(rng);
            out[j] = self.mean[j] + (0.5 * self.log_variance[j]).exp() * eps * self.scale[j];
        }
        out
    }
}

/// Batched posterior inside the graph.
#[derive(Clone)]
pub struct PoseDistTensor {
    /// `[B, 6]`, physical units.
    pub mean: Tensor,
    /// `[B, 6]`, clamped.
    pub log_variance: Tensor,
    pub scale: [f64; 6],
}

impl PoseDistTensor {
    fn scale_tensor(&self) -> Tensor {
        Tensor::from_vec(self.scale.to_vec(), &[1, 6])
    }

    /// Sum over the batch and the six parameters of the KL to `N(0, I)`.
    pub fn kl(&self) -> Tensor {
        let mu = self.mean.div(&self.scale_tensor());
        self.log_variance
            .exp()
            .add(&mu.sqr())
            .sub(&self.log_variance)
            .add_scalar(-1.0)
            .sum_all()
            .scale(0.5)
    }

    /// `mean + exp(½·logvar)·ε·scale` with `ε ~ N(0, I)` from `rng`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let n = self.mean.numel();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(eps, self.mean.shape());
        self.log_variance
            .scale(0.5)
            .exp()
            .mul(&eps)
            .mul(&self.scale_tensor())
            .add(&self.mean)
    }

    pub fn to_distributions(&self) -> Vec<PoseDistribution> {
        let b = self.mean.shape()[0];
        (0..b)
            .map(|i| {
                let mut mean = [0.0; 6];
                let mut lv = [0.0; 6];
                mean.copy_from_slice(&self.mean.data()[i * 6..i * 6 + 6]);
                lv.copy_from_slice(&self.log_variance.data()[i * 6..i * 6 + 6]);
                PoseDistribution {
                    mean,
                    log_variance: lv,
                    scale: self.scale,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseNetConfig {
    /// Widths of the downsampling stages.
    pub channels: Vec<usize>,
    pub prior: PosePrior,
    /// Initial bias of the log-variance head.
    pub init_log_variance: f64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            channels: vec![32, 64, 128, 256, 256],
            prior: PosePrior::default(),
            init_log_variance: -8.0,
        }
    }
}

impl PoseNetConfig {
    pub fn toy() -> Self {
        PoseNetConfig {
            channels: vec![8, 16, 16, 32],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("pose widths must be non-empty and positive".into()));
        }
        self.prior.validate()
    }
}

#[derive(Debug, Clone)]
pub struct PoseNet {
    pub cfg: PoseNetConfig,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    mean: Linear,
    logvar: Linear,
}

impl PoseNet {
    pub fn new(cfg: &PoseNetConfig) -> Self {
        let c = &cfg.channels;
        let last = *c.last().expect("validated non-empty");
        PoseNet {
            cfg: cfg.clone(),
            stem: Conv2d::new("stem", 6, c[0], 3, 2),
            blocks: (1..c.len())
                .map(|i| ResBlock::new(&format!("block{i}"), c[i - 1], c[i], 2))
                .collect(),
            mean: Linear::new("mean", last, 6),
            logvar: Linear::new("logvar", last, 6),
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.stem.init(&mut store, rng);
        for b in &self.blocks {
            b.init(&mut store, rng);
        }
        self.mean.init_scaled(&mut store, rng, 0.01, 0.0);
        self.logvar.init_scaled(&mut store, rng, 0.01, self.cfg.init_log_variance);
        store
    }

    /// Posterior over the pose taking `frame_b`'s camera to `frame_a`'s.
    /// Both frames are `[B,3,H,W]`.
    pub fn encode(&self, s: &Scope, frame_a: &Tensor, frame_b: &Tensor) -> Result<PoseDistTensor> {
        if frame_a.shape() != frame_b.shape() {
            return Err(Error::domain(format!(
                "frame shapes differ: {:?} vs {:?}",
                frame_a.shape(),
                frame_b.shape()
            )));
        }
        if frame_a.shape().len() != 4 || frame_a.shape()[1] != 3 {
            return Err(Error::domain(format!("expected [B,3,H,W] frames, got {:?}", frame_a.shape())));
        }
        let x = Tensor::concat(&[frame_a.clone(), frame_b.clone()], 1).affine(1.0 / 0.225, -0.45 / 0.225);
        let mut x = self.stem.forward(s, &x).leaky_relu(LEAKY_SLOPE);
        for b in &self.blocks {
            x = b.forward(s, &x);
        }
        let feat = global_avg_pool(&x);
        let scale = self.cfg.prior.scales();
        let mean = self.mean.forward(s, &feat).mul(&Tensor::from_vec(scale.to_vec(), &[1, 6]));
        let log_variance = self.logvar.forward(s, &feat).clamp(LOGVAR_MIN, LOGVAR_MAX);
        Ok(PoseDistTensor {
            mean,
            log_variance,
            scale,
        })
    }
}
