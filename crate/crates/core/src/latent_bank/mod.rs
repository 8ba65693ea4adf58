//! Style-based depth-map generator used as a frozen latent bank.
//!
//! During pretraining the generator maps a Gaussian latent to depth maps at
//! a ladder of resolutions. In bank mode the core weights are frozen, the
//! coarsest encoder features replace the latent input, and a separate set of
//! trainable AdIN heads derives per-level styles from the encoder pyramid.

mod critic;
mod pretrain;

pub use critic::{gradient_penalty, wgan_losses, ConstCritic, Critic, LinearCritic, ResCritic, WganTerms};
pub use pretrain::{pretrain, PretrainConfig, PretrainLog, PretrainOutcome, PretrainRecord, StageCheckpoint};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth_net::{BankFeatures, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, normal_vec, rng_from_seed, Conv2d, ConvTranspose2x, Linear, ParamStore, Scope, LEAKY_SLOPE};
use crate::raster::DepthMap;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 512;
const IN_EPS: f64 = 1e-5;
/// Side of the grid the latent is first projected onto.
const SEED_SIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Widths per level, coarsest first.
    pub channels: Vec<usize>,
    /// Side of the coarsest level.
    pub base_resolution: usize,
    pub latent_dim: usize,
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        GeneratorConfig {
            channels: vec![32, 32, 16, 8, 8],
            base_resolution: 4,
            latent_dim: LATENT_DIM,
        }
    }

    pub fn full_scale() -> Self {
        GeneratorConfig {
            channels: vec![256, 128, 64, 32, 16],
            base_resolution: 30,
            latent_dim: LATENT_DIM,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("generator widths must be non-empty and positive".into()));
        }
        if self.base_resolution == 0 || self.latent_dim == 0 {
            return Err(Error::Config("base resolution and latent size must be positive".into()));
        }
        Ok(())
    }

    pub fn resolution_at(&self, level: usize) -> usize {
        self.base_resolution << level
    }

    /// Ladder level producing `resolution`.
    pub fn level_for(&self, resolution: usize) -> Result<usize> {
        (0..self.levels())
            .find(|&k| self.resolution_at(k) == resolution)
            .ok_or_else(|| {
                let ladder: Vec<usize> = (0..self.levels()).map(|k| self.resolution_at(k)).collect();
                Error::domain(format!("resolution {resolution} is not on the ladder {ladder:?}"))
            })
    }
}

/// Per-channel style: `output = γ·normalize(x) + β`.
pub fn adin_fuse(features: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = features.dims4();
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [b, c] {
            return Err(Error::domain(format!(
                "{name} has shape {:?}, features have {c} channels and batch {b}",
                t.shape()
            )));
        }
    }
    let g = gamma.reshape(&[b, c, 1, 1]);
    let be = beta.reshape(&[b, c, 1, 1]);
    Ok(features.instance_norm(IN_EPS).mul(&g).add(&be))
}

/// Affine head producing `(γ, β)` with `γ = 1 + Aγ(s)`.
#[derive(Debug, Clone)]
struct StyleHead {
    lin: Linear,
    channels: usize,
}

impl StyleHead {
    fn new(name: String, d_in: usize, channels: usize) -> Self {
        StyleHead {
            lin: Linear::new(name, d_in, 2 * channels),
            channels,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.lin.init_scaled(store, rng, 0.1, 0.0);
    }

    fn forward(&self, s: &Scope, style: &Tensor) -> (Tensor, Tensor) {
        let o = self.lin.forward(s, style);
        let gamma = o.narrow(1, 0, self.channels).add_scalar(1.0);
        let beta = o.narrow(1, self.channels, self.channels);
        (gamma, beta)
    }
}

#[derive(Debug, Clone)]
struct GenLevel {
    up: Option<ConvTranspose2x>,
    conv: Conv2d,
    noise: String,
    style: StyleHead,
    to_depth: Conv2d,
}

/// Generator architecture; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    input: Linear,
    mapping: Linear,
    levels: Vec<GenLevel>,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let c = &cfg.channels;
        let levels = (0..cfg.levels())
            .map(|k| GenLevel {
                up: (k > 0).then(|| ConvTranspose2x::new(format!("level{k}.up"), c[k - 1], c[k])),
                conv: Conv2d::new(format!("level{k}.conv"), c[k], c[k], 3, 1),
                noise: format!("level{k}.noise_strength"),
                style: StyleHead::new(format!("level{k}.style"), cfg.latent_dim, c[k]),
                to_depth: Conv2d::new(format!("level{k}.to_depth"), c[k], 1, 1, 1),
            })
            .collect();
        Generator {
            cfg: cfg.clone(),
            input: Linear::new("input", cfg.latent_dim, c[0] * SEED_SIDE * SEED_SIDE),
            mapping: Linear::new("mapping", cfg.latent_dim, cfg.latent_dim),
            levels,
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.input.init(&mut store, rng);
        self.mapping.init(&mut store, rng);
        for l in &self.levels {
            if let Some(u) = &l.up {
                u.init(&mut store, rng);
            }
            l.conv.init(&mut store, rng);
            store.insert(&l.noise, &[l.conv.c_out], vec![0.0; l.conv.c_out]);
            l.style.init(&mut store, rng);
            l.to_depth.init(&mut store, rng);
        }
        store
    }

    /// Depth maps in (0, 1) at ladder level `level` for latents `z`
    /// (`[B, latent_dim]`); per-pixel noise is drawn from `noise_seed`.
    pub fn synthesize(&self, s: &Scope, z: &Tensor, noise_seed: u64, level: usize) -> Result<Tensor> {
        let b = z.shape()[0];
        if z.shape() != [b, self.cfg.latent_dim] {
            return Err(Error::domain(format!(
                "latent batch has shape {:?}, expected [B, {}]",
                z.shape(),
                self.cfg.latent_dim
            )));
        }
        if level >= self.cfg.levels() {
            return Err(Error::domain(format!("level {level} beyond the {}-level ladder", self.cfg.levels())));
        }
        let c0 = self.cfg.channels[0];
        let w = self.mapping.forward(s, z).leaky_relu(LEAKY_SLOPE);
        let r0 = self.cfg.base_resolution;
        let mut x = self
            .input
            .forward(s, z)
            .reshape(&[b, c0, SEED_SIDE, SEED_SIDE])
            .leaky_relu(LEAKY_SLOPE)
            .resize_bilinear(r0, r0);
        let mut rng = rng_from_seed(noise_seed);
        for (k, l) in self.levels.iter().enumerate().take(level + 1) {
            if let Some(u) = &l.up {
                x = u.forward(s, &x).leaky_relu(LEAKY_SLOPE);
            }
            x = l.conv.forward(s, &x);
            let (_, c, h, wd) = x.dims4();
            let noise = Tensor::from_vec(normal_vec(&mut rng, b * h * wd, 1.0), &[b, 1, h, wd]);
            let strength = s.get(&l.noise).reshape(&[1, c, 1, 1]);
            x = x.add(&noise.mul(&strength)).leaky_relu(LEAKY_SLOPE);
            let (g, be) = l.style.forward(s, &w);
            x = adin_fuse(&x, &g, &be)?;
            if k == level {
                return Ok(l.to_depth.forward(s, &x).sigmoid());
            }
        }
        unreachable!("loop returns at the requested level")
    }

    /// One depth map at `resolution` from latent `z`.
    pub fn generate(&self, store: &ParamStore, z: &[f64], noise_seed: u64, resolution: usize) -> Result<DepthMap> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("latent vector has non-finite entries"));
        }
        let level = self.cfg.level_for(resolution)?;
        let binder = crate::nn::Binder::inference();
        let zt = Tensor::from_vec(z.to_vec(), &[1, z.len()]);
        let out = self.synthesize(&binder.scope("latent_bank", store), &zt, noise_seed, level)?;
        Ok(DepthMap::from_tensor(&out).remove(0))
    }

    /// Bank-mode forward: encoder features in, per-level features out.
    /// `core` must be frozen; `adapter` holds the trainable AdIN set.
    pub fn bank_forward(
        &self,
        core: &Scope,
        adapter: &Scope,
        bank: &BankAdapter,
        h: &FeaturePyramid,
    ) -> Result<BankFeatures> {
        let n = self.cfg.levels();
        if h.levels.len() != n {
            return Err(Error::domain(format!(
                "pyramid has {} levels, bank ladder has {n}",
                h.levels.len()
            )));
        }
        for (k, t) in h.levels.iter().enumerate() {
            let (_, c, hh, ww) = t.dims4();
            let r = self.cfg.resolution_at(k);
            if hh != r || ww != r || c != bank.enc_channels[k] {
                return Err(Error::domain(format!(
                    "pyramid level {k} is {c}x{hh}x{ww}, bank expects {}x{r}x{r}",
                    bank.enc_channels[k]
                )));
            }
        }
        let mut out = Vec::with_capacity(n);
        let mut x = bank.input.forward(adapter, &h.levels[0]).leaky_relu(LEAKY_SLOPE);
        for (k, l) in self.levels.iter().enumerate() {
            if let Some(u) = &l.up {
                x = u.forward(core, &x).leaky_relu(LEAKY_SLOPE);
            }
            x = l.conv.forward(core, &x).leaky_relu(LEAKY_SLOPE);
            let (g, be) = bank.heads[k].forward(adapter, &global_avg_pool(&h.levels[k]));
            x = adin_fuse(&x, &g, &be)?;
            out.push(x.clone());
        }
        Ok(BankFeatures { levels: out })
    }
}

/// The trainable bank-mode AdIN set: an input adapter on `h^0` and one
/// style head per level.
#[derive(Debug, Clone)]
pub struct BankAdapter {
    enc_channels: Vec<usize>,
    input: Conv2d,
    heads: Vec<StyleHead>,
}

impl BankAdapter {
    /// `enc_channels` are encoder widths, coarsest first.
    pub fn new(gen: &GeneratorConfig, enc_channels: &[usize]) -> Self {
        BankAdapter {
            enc_channels: enc_channels.to_vec(),
            input: Conv2d::new("input", enc_channels[0], gen.channels[0], 1, 1),
            heads: (0..gen.levels())
                .map(|k| StyleHead::new(format!("level{k}.style"), enc_channels[k], gen.channels[k]))
                .collect(),
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.input.init(&mut store, rng);
        for h in &self.heads {
            h.init(&mut store, rng);
        }
        store
    }
}

/// Latents for `count` samples drawn from `seed`.
pub fn sample_latents(seed: u64, count: usize, dim: usize) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_vec(normal_vec(&mut rng, count * dim, 1.0), &[count, dim])
}

/// Fraction of sample pairs whose mean absolute difference is positive.
pub fn distinct_pair_fraction(samples: &[DepthMap]) -> f64 {
    let mut pairs = 0usize;
    let mut distinct = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            pairs += 1;
            let mad: f64 = samples[i]
                .data
                .iter()
                .zip(&samples[j].data)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / samples[i].data.len() as f64;
            if mad > 0.0 {
                distinct += 1;
            }
        }
    }
    if pairs == 0 {
        return 1.0;
    }
    distinct as f64 / pairs as f64
}

/// Mean absolute difference over all pairs of maps; 0 for fewer than two.
pub fn pairwise_spread(maps: &[DepthMap]) -> f64 {
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let a = &maps[i].data;
            let b = &maps[j].data;
            acc += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        acc / pairs as f64
    }
}
