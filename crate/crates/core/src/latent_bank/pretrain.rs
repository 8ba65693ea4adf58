//! Progressive WGAN-GP pretraining of the generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::critic::{wgan_losses, ResCritic};
use super::{sample_latents, Generator};
use crate::error::{Error, Result};
use crate::nn::{rng_from_seed, Binder, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::raster::DepthMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Final output side; must be on the generator ladder.
    pub resolution: usize,
    /// Side of the first progressive stage.
    pub start_resolution: usize,
    /// Generator updates in total, split evenly over the stages.
    pub steps: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Critic widths per ladder level, coarsest first.
    pub critic_channels: Vec<usize>,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn toy() -> Self {
        PretrainConfig {
            resolution: 64,
            start_resolution: 4,
            steps: 2000,
            n_critic: 5,
            batch_size: 8,
            gamma: 10.0,
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            critic_channels: vec![32, 32, 16, 8, 8],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.n_critic == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps, n_critic and batch_size must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.lr > 0.0) {
            return Err(Error::Config("gamma must be non-negative and lr positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub stage: usize,
    pub resolution: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub gp: f64,
    /// `E[D(real)] − E[D(fake)]` from the last critic update.
    pub gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub records: Vec<PretrainRecord>,
}

impl PretrainLog {
    /// Trailing moving average of the absolute Wasserstein gap.
    pub fn smoothed_gap(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.records.len());
        let mut acc = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            acc += r.gap.abs();
            if i >= w {
                acc -= self.records[i - w].gap.abs();
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StageCheckpoint {
    pub stage: usize,
    pub resolution: usize,
    pub step: usize,
    pub generator: ParamStore,
}

pub struct PretrainOutcome {
    pub generator: ParamStore,
    pub critic: ParamStore,
    pub generator_optimizer: Adam,
    pub log: PretrainLog,
    pub checkpoints: Vec<StageCheckpoint>,
}

fn stage_levels(gen: &Generator, cfg: &PretrainConfig) -> Result<Vec<usize>> {
    let first = gen.cfg.level_for(cfg.start_resolution)?;
    let last = gen.cfg.level_for(cfg.resolution)?;
    if first > last {
        return Err(Error::Config(format!(
            "start resolution {} exceeds target {}",
            cfg.start_resolution, cfg.resolution
        )));
    }
    Ok((first..=last).collect())
}

/// Trains `gen` on `corpus` (maps with values in [0, 1]) with alternating
/// critic and generator updates, growing the output resolution by stages.
pub fn pretrain(
    gen: &Generator,
    corpus: &[DepthMap],
    cfg: &PretrainConfig,
    mut on_stage: impl FnMut(&StageCheckpoint) -> Result<()>,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::domain("pretraining corpus is empty"));
    }
    cfg.validate()?;
    if cfg.critic_channels.len() != gen.cfg.levels() {
        return Err(Error::Config(format!(
            "critic needs {} widths, got {}",
            gen.cfg.levels(),
            cfg.critic_channels.len()
        )));
    }
    for (i, m) in corpus.iter().enumerate() {
        if m.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain(format!("corpus map {i} has values outside [0, 1]")));
        }
    }
    let levels = stage_levels(gen, cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut g_store = gen.init(&mut rng);
    let critic = ResCritic::new(&cfg.critic_channels);
    let mut d_store = critic.init(&mut rng);
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut g_opt = Adam::new(adam);
    let mut d_opt = Adam::new(adam);
    let mut log = PretrainLog::default();
    let mut checkpoints = Vec::new();

    let n_stages = levels.len();
    let mut step = 0usize;
    for (si, &level) in levels.iter().enumerate() {
        let res = gen.cfg.resolution_at(level);
        let maps: Vec<Vec<f64>> = corpus
            .iter()
            .map(|m| {
                Tensor::from_vec(m.data.clone(), &[1, 1, m.height, m.width])
                    .resize_bilinear(res, res)
                    .to_vec()
            })
            .collect();
        let stage_end = cfg.steps * (si + 1) / n_stages;
        while step < stage_end {
            let mut last = (0.0, 0.0, 0.0);
            for _ in 0..cfg.n_critic {
                let mut real = Vec::with_capacity(cfg.batch_size * res * res);
                for _ in 0..cfg.batch_size {
                    real.extend_from_slice(&maps[rng.random_range(0..maps.len())]);
                }
                let real = Tensor::from_vec(real, &[cfg.batch_size, 1, res, res]);
                let z = sample_latents(rng.random(), cfg.batch_size, gen.cfg.latent_dim);
                let frozen_g = Binder::inference();
                let fake = gen.synthesize(&frozen_g.scope("latent_bank", &g_store), &z, rng.random(), level)?;
                let binder = Binder::training();
                let d = critic.bind(binder.scope("critic", &d_store), level)?;
                let terms = wgan_losses(&d, &real, &fake, cfg.gamma, &mut rng)?;
                last = (terms.loss_d.item(), terms.gp.item(), terms.wasserstein_gap());
                let mut grads = terms.loss_d.backward();
                let gm = binder.collect(&mut grads);
                d_opt.step(&mut [("critic", &mut d_store)], &gm)?;
            }
            let z = sample_latents(rng.random(), cfg.batch_size, gen.cfg.latent_dim);
            let binder = Binder::training();
            let fake = gen.synthesize(&binder.scope("latent_bank", &g_store), &z, rng.random(), level)?;
            let fixed_d = Binder::inference();
            let d = critic.bind(fixed_d.scope("critic", &d_store), level)?;
            let loss_g = crate::latent_bank::Critic::score(&d, &fake).mean_all().neg();
            let mut grads = loss_g.backward();
            let gm = binder.collect(&mut grads);
            g_opt.step(&mut [("latent_bank", &mut g_store)], &gm)?;
            step += 1;
            log.records.push(PretrainRecord {
                step,
                stage: si,
                resolution: res,
                loss_d: last.0,
                loss_g: loss_g.item(),
                gp: last.1,
                gap: last.2,
            });
            if !last.0.is_finite() || !loss_g.item().is_finite() {
                return Err(Error::domain(format!("pretraining diverged at step {step}")));
            }
        }
        let ck = StageCheckpoint {
            stage: si,
            resolution: res,
            step,
            generator: g_store.clone(),
        };
        on_stage(&ck)?;
        checkpoints.push(ck);
    }
    Ok(PretrainOutcome {
        generator: g_store,
        critic: d_store,
        generator_optimizer: g_opt,
        log,
        checkpoints,
    })
}
