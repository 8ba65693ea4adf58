//! Photometric self-supervised training of the depth and pose networks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth_net::{BankFeatures, DepthDecoder, DepthEncoder, DepthNetConfig, DepthPrediction};
use crate::error::{Error, Result};
use crate::geometry::{inverse_warp_tensor, CameraIntrinsics, Pose6};
use crate::latent_bank::{BankAdapter, Generator, GeneratorConfig};
use crate::nn::{rng_from_seed, Binder, ParamStore, Scope};
use crate::optim::{Adam, AdamConfig};
use crate::pose_net::{PoseDistTensor, PoseDistribution, PoseNet, PoseNetConfig, PosePrior};
use crate::raster::{DepthMap, Image};
use crate::tensor::Tensor;

/// Frames `t−1, t, t+1` with optional ground truth for frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    pub index: usize,
    pub prev: Image,
    pub cur: Image,
    pub next: Image,
    pub intrinsics: CameraIntrinsics,
    pub gt_depth: Option<DepthMap>,
    /// `(T_{t−1←t}, T_{t+1←t})`.
    pub gt_rel: Option<(Pose6, Pose6)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Photometric {
    /// Both source frames contribute a masked MSE.
    #[default]
    Sum,
    /// Per pixel, only the better-matching source contributes.
    MinOverSources,
}

impl std::str::FromStr for Photometric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Photometric::Sum),
            "min" | "min_over_sources" => Ok(Photometric::MinOverSources),
            _ => Err(Error::Config(format!("photometric mode `{s}` (expected sum|min)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub use_vae: bool,
    /// Reparameterised pose samples; off means the mean is used.
    pub sample_poses: bool,
    pub photometric: Photometric,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1e-3,
            use_vae: true,
            sample_poses: true,
            photometric: Photometric::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Factor applied to the learning rate once `lr_decay_at` of the run is
    /// done; 1 keeps the rate fixed.
    pub lr_decay: f64,
    pub lr_decay_at: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stops after this many updates when set, cycling epochs as needed.
    pub max_steps: Option<usize>,
    pub use_latent_bank: bool,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            lr: 1e-4,
            lr_decay: 1.0,
            lr_decay_at: 0.75,
            weight_decay: 1e-3,
            epochs: 20,
            max_steps: None,
            use_latent_bank: true,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.epochs == 0 && self.max_steps.is_none()) {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.loss.beta >= 0.0) {
            return Err(Error::Config("lr must be positive; weight_decay and beta non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0 && (0.0..=1.0).contains(&self.lr_decay_at)) {
            return Err(Error::Config("lr_decay must lie in (0, 1] and lr_decay_at in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for the update that follows `step` completed ones.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if step as f64 >= self.lr_decay_at * total_steps as f64 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Loss components as plain numbers; `total = reproj_minus + reproj_plus + β·kl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reproj_minus: f64,
    pub reproj_plus: f64,
    /// `KL(q₋) + KL(q₊)`, unweighted, averaged over the batch.
    pub kl: f64,
    pub total: f64,
    /// Photometric loss (both sources) at each depth scale, finest first.
    pub per_scale: Vec<f64>,
    pub empty_mask_warning: bool,
}

/// Graph-level loss components.
pub struct LossTerms {
    pub reproj_minus: Tensor,
    pub reproj_plus: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
    pub per_scale: Vec<f64>,
    pub empty_mask_warning: bool,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            reproj_minus: self.reproj_minus.item(),
            reproj_plus: self.reproj_plus.item(),
            kl: self.kl.item(),
            total: self.total.item(),
            per_scale: self.per_scale.clone(),
            empty_mask_warning: self.empty_mask_warning,
        }
    }
}

/// Mean squared error over pixels where `mask` is 1, averaged over
/// channels. An empty mask gives 0 and `true`.
pub fn reprojection_loss(warped: &Tensor, target: &Tensor, mask: &Tensor) -> (Tensor, bool) {
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return (Tensor::scalar(0.0), true);
    }
    let c = target.shape()[1] as f64;
    let loss = warped.sub(target).sqr().mul(mask).sum_all().scale(1.0 / (c * count));
    (loss, false)
}

/// Batched frames of a triplet window, each `[B,3,H,W]`.
pub struct TripletTensors {
    pub prev: Tensor,
    pub cur: Tensor,
    pub next: Tensor,
}

impl TripletTensors {
    pub fn from_triplets(batch: &[&FrameTriplet]) -> Result<Self> {
        let pick = |f: fn(&FrameTriplet) -> &Image| Image::batch(&batch.iter().map(|t| f(t)).collect::<Vec<_>>());
        Ok(TripletTensors {
            prev: pick(|t| &t.prev)?,
            cur: pick(|t| &t.cur)?,
            next: pick(|t| &t.next)?,
        })
    }
}

/// Photometric terms at one depth scale, already at full resolution.
/// `pose_minus` moves frame-`t` points into frame `t−1`, likewise
/// `pose_plus` for `t+1`.
pub fn reprojection_terms(
    frames: &TripletTensors,
    k: &CameraIntrinsics,
    depth: &Tensor,
    pose_minus: &Tensor,
    pose_plus: &Tensor,
    mode: Photometric,
) -> Result<(Tensor, Tensor, bool)> {
    let wm = inverse_warp_tensor(&frames.prev, depth, pose_minus, k)?;
    let wp = inverse_warp_tensor(&frames.next, depth, pose_plus, k)?;
    match mode {
        Photometric::Sum => {
            let (lm, em) = reprojection_loss(&wm.image, &frames.cur, &wm.mask);
            let (lp, ep) = reprojection_loss(&wp.image, &frames.cur, &wp.mask);
            Ok((lm, lp, em || ep))
        }
        Photometric::MinOverSources => {
            let em = wm.image.sub(&frames.cur).sqr().mean_keepdim(&[1]);
            let ep = wp.image.sub(&frames.cur).sqr().mean_keepdim(&[1]);
            let n = wm.valid.len();
            let mut take_m = vec![0.0; n];
            let mut take_p = vec![0.0; n];
            for i in 0..n {
                let (vm, vp) = (wm.valid[i], wp.valid[i]);
                if vm && (!vp || em.data()[i] <= ep.data()[i]) {
                    take_m[i] = 1.0;
                } else if vp {
                    take_p[i] = 1.0;
                }
            }
            let count: f64 = take_m.iter().chain(&take_p).sum();
            if count == 0.0 {
                return Ok((Tensor::scalar(0.0), Tensor::scalar(0.0), true));
            }
            let shape = em.shape().to_vec();
            let lm = em.mul(&Tensor::from_vec(take_m, &shape)).sum_all().scale(1.0 / count);
            let lp = ep.mul(&Tensor::from_vec(take_p, &shape)).sum_all().scale(1.0 / count);
            Ok((lm, lp, false))
        }
    }
}

fn pose_input(q: &PoseDistTensor, cfg: &LossConfig, rng: &mut ChaCha8Rng) -> Tensor {
    if cfg.use_vae && cfg.sample_poses {
        q.sample(rng)
    } else {
        q.mean.clone()
    }
}

/// Multi-scale loss: every depth scale is resized to full resolution,
/// both neighbours are warped into frame `t`, the photometric terms are
/// averaged over scales and `β·(KL₋ + KL₊)` is added when the VAE is on.
pub fn total_loss_terms(
    frames: &TripletTensors,
    k: &CameraIntrinsics,
    depth: &DepthPrediction,
    q_minus: &PoseDistTensor,
    q_plus: &PoseDistTensor,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    if depth.depth.is_empty() {
        return Err(Error::domain("depth prediction has no scales"));
    }
    let (b, _, h, w) = frames.cur.dims4();
    let pm = pose_input(q_minus, cfg, rng);
    let pp = pose_input(q_plus, cfg, rng);
    let mut sum_m = Tensor::scalar(0.0);
    let mut sum_p = Tensor::scalar(0.0);
    let mut per_scale = Vec::with_capacity(depth.depth.len());
    let mut empty = false;
    for d in &depth.depth {
        if d.dims4().0 != b {
            return Err(Error::domain("depth batch differs from frame batch"));
        }
        let full = d.resize_bilinear(h, w);
        let (lm, lp, e) = reprojection_terms(frames, k, &full, &pm, &pp, cfg.photometric)?;
        per_scale.push(lm.item() + lp.item());
        empty |= e;
        sum_m = sum_m.add(&lm);
        sum_p = sum_p.add(&lp);
    }
    let n = depth.depth.len() as f64;
    let reproj_minus = sum_m.scale(1.0 / n);
    let reproj_plus = sum_p.scale(1.0 / n);
    let mut total = reproj_minus.add(&reproj_plus);
    let kl = if cfg.use_vae {
        let kl = q_minus.kl().add(&q_plus.kl()).scale(1.0 / b as f64);
        total = total.add(&kl.scale(cfg.beta));
        kl
    } else {
        Tensor::scalar(0.0)
    };
    Ok(LossTerms {
        reproj_minus,
        reproj_plus,
        kl,
        total,
        per_scale,
        empty_mask_warning: empty,
    })
}

fn dist_tensor(q: &PoseDistribution) -> PoseDistTensor {
    PoseDistTensor {
        mean: Tensor::from_vec(q.mean.to_vec(), &[1, 6]),
        log_variance: Tensor::from_vec(q.log_variance.to_vec(), &[1, 6]),
        scale: q.scale,
    }
}

/// Loss for one triplet with given predictions; deterministic in `seed`.
pub fn total_loss(
    triplet: &FrameTriplet,
    depth: &DepthPrediction,
    q_minus: &PoseDistribution,
    q_plus: &PoseDistribution,
    cfg: &LossConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    let frames = TripletTensors::from_triplets(&[triplet])?;
    let mut rng = rng_from_seed(seed);
    let terms = total_loss_terms(
        &frames,
        &triplet.intrinsics,
        depth,
        &dist_tensor(q_minus),
        &dist_tensor(q_plus),
        cfg,
        &mut rng,
    )?;
    Ok(terms.breakdown())
}

/// Architecture of the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: DepthNetConfig,
    pub generator: GeneratorConfig,
    pub pose: PoseNetConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            depth: DepthNetConfig::toy(),
            generator: GeneratorConfig::toy(),
            pose: PoseNetConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.depth.validate()?;
        self.generator.validate()?;
        self.pose.validate()?;
        if self.depth.levels != self.generator.levels() {
            return Err(Error::Config(format!(
                "depth encoder has {} levels, generator ladder has {}",
                self.depth.levels,
                self.generator.levels()
            )));
        }
        Ok(())
    }

    /// Input side the bank ladder expects.
    pub fn bank_resolution(&self) -> usize {
        self.generator.resolution_at(self.generator.levels() - 1)
    }
}

pub const GROUPS: [&str; 5] = ["depth_encoder", "depth_decoder", "adin_trainable", "latent_bank", "pose_encoder"];

/// All parameter groups of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub depth_encoder: ParamStore,
    pub depth_decoder: ParamStore,
    pub adin_trainable: ParamStore,
    pub latent_bank: ParamStore,
    pub pose_encoder: ParamStore,
}

impl ModelParams {
    pub fn into_groups(self) -> BTreeMap<String, ParamStore> {
        [
            ("depth_encoder", self.depth_encoder),
            ("depth_decoder", self.depth_decoder),
            ("adin_trainable", self.adin_trainable),
            ("latent_bank", self.latent_bank),
            ("pose_encoder", self.pose_encoder),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_groups(mut g: BTreeMap<String, ParamStore>) -> Result<Self> {
        let mut take = |k: &str| g.remove(k).ok_or_else(|| Error::Shape(format!("missing parameter group `{k}`")));
        Ok(ModelParams {
            depth_encoder: take("depth_encoder")?,
            depth_decoder: take("depth_decoder")?,
            adin_trainable: take("adin_trainable")?,
            latent_bank: take("latent_bank")?,
            pose_encoder: take("pose_encoder")?,
        })
    }

    fn trainable(&mut self) -> [(&'static str, &mut ParamStore); 4] {
        [
            ("depth_encoder", &mut self.depth_encoder),
            ("depth_decoder", &mut self.depth_decoder),
            ("adin_trainable", &mut self.adin_trainable),
            ("pose_encoder", &mut self.pose_encoder),
        ]
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: DepthEncoder,
    pub decoder: DepthDecoder,
    pub generator: Generator,
    pub adapter: BankAdapter,
    pub pose: PoseNet,
}

/// Scopes for one forward pass.
pub struct Bound<'a> {
    pub encoder: Scope<'a>,
    pub decoder: Scope<'a>,
    pub adapter: Scope<'a>,
    pub bank: Scope<'a>,
    pub pose: Scope<'a>,
}

impl<'a> Bound<'a> {
    pub fn new(binder: &'a Binder, p: &'a ModelParams) -> Self {
        Bound {
            encoder: binder.scope("depth_encoder", &p.depth_encoder),
            decoder: binder.scope("depth_decoder", &p.depth_decoder),
            adapter: binder.scope("adin_trainable", &p.adin_trainable),
            bank: binder.scope("latent_bank", &p.latent_bank),
            pose: binder.scope("pose_encoder", &p.pose_encoder),
        }
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut enc_coarse = cfg.depth.encoder_channels[..cfg.depth.levels].to_vec();
        enc_coarse.reverse();
        Ok(Model {
            cfg: cfg.clone(),
            encoder: DepthEncoder::new(&cfg.depth),
            decoder: DepthDecoder::new(&cfg.depth, &cfg.generator.channels),
            generator: Generator::new(&cfg.generator),
            adapter: BankAdapter::new(&cfg.generator, &enc_coarse),
            pose: PoseNet::new(&cfg.pose),
        })
    }

    /// Fresh parameters; the bank is frozen.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = rng_from_seed(seed);
        let mut latent_bank = self.generator.init(&mut rng);
        latent_bank.freeze();
        ModelParams {
            depth_encoder: self.encoder.init(&mut rng),
            depth_decoder: self.decoder.init(&mut rng),
            adin_trainable: self.adapter.init(&mut rng),
            latent_bank,
            pose_encoder: self.pose.init(&mut rng),
        }
    }

    /// Expected group layout, for checking loaded checkpoints.
    pub fn layout(&self) -> BTreeMap<String, ParamStore> {
        self.init(0).into_groups()
    }

    /// Depth at four scales for `[B,3,H,W]` frames.
    pub fn predict_depth(&self, s: &Bound, image: &Tensor, use_bank: bool) -> Result<DepthPrediction> {
        let h = self.encoder.encode(&s.encoder, image)?;
        let a = if use_bank {
            self.generator.bank_forward(&s.bank, &s.adapter, &self.adapter, &h)?
        } else {
            BankFeatures::zeros(&h, self.decoder.bank_channels())
        };
        self.decoder.decode(&s.decoder, &h, &a)
    }

    /// Loss for a batch of triplets.
    pub fn loss(
        &self,
        s: &Bound,
        frames: &TripletTensors,
        k: &CameraIntrinsics,
        use_bank: bool,
        cfg: &LossConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossTerms> {
        let depth = self.predict_depth(s, &frames.cur, use_bank)?;
        let q_minus = self.pose.encode(&s.pose, &frames.prev, &frames.cur)?;
        let q_plus = self.pose.encode(&s.pose, &frames.next, &frames.cur)?;
        total_loss_terms(frames, k, &depth, &q_minus, &q_plus, cfg, rng)
    }

    /// Full-resolution depth maps for `images` in inference mode.
    pub fn infer_depth(&self, p: &ModelParams, images: &[&Image], use_bank: bool) -> Result<Vec<DepthMap>> {
        let binder = Binder::inference();
        let s = Bound::new(&binder, p);
        let pred = self.predict_depth(&s, &Image::batch(images)?, use_bank)?;
        Ok(DepthMap::from_tensor(&pred.depth[0]))
    }

    /// Posterior means of `T_{a←b}` for each pair.
    pub fn infer_pose(&self, p: &ModelParams, a: &[&Image], b: &[&Image]) -> Result<Vec<PoseDistribution>> {
        let binder = Binder::inference();
        let s = Bound::new(&binder, p);
        let q = self.pose.encode(&s.pose, &Image::batch(a)?, &Image::batch(b)?)?;
        Ok(q.to_distributions())
    }

    pub fn prior(&self) -> &PosePrior {
        &self.pose.cfg.prior
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Callbacks during [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _rec: &StepRecord) -> Result<()> {
        Ok(())
    }
    /// Called after every completed epoch.
    fn on_epoch(&mut self, _epoch: usize, _params: &ModelParams, _opt: &Adam, _step: usize) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub log: Vec<StepRecord>,
    pub steps: usize,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    rng_from_seed(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Optimises every group except the frozen bank with one Adam instance.
pub fn train(
    dataset: &[FrameTriplet],
    model: &Model,
    mut params: ModelParams,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    cfg.validate()?;
    if cfg.use_latent_bank && !params.latent_bank.is_frozen() {
        return Err(Error::domain("the latent bank must be frozen before training"));
    }
    let k = dataset[0].intrinsics;
    if dataset.iter().any(|t| t.intrinsics != k) {
        return Err(Error::domain("all triplets must share one camera"));
    }
    let mut opt = Adam::new(cfg.adam());
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * per_epoch);
    let mut step = 0usize;
    let mut epoch = 0usize;
    while step < total_steps {
        order.shuffle(&mut rng_from_seed(cfg.seed.wrapping_add(epoch as u64 + 1)));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            opt.cfg.lr = cfg.lr_at(step, total_steps);
            let batch: Vec<&FrameTriplet> = chunk.iter().map(|&i| &dataset[i]).collect();
            let frames = TripletTensors::from_triplets(&batch)?;
            let binder = Binder::training();
            let terms = {
                let s = Bound::new(&binder, &params);
                let mut rng = step_rng(cfg.seed, step);
                model.loss(&s, &frames, &k, cfg.use_latent_bank, &cfg.loss, &mut rng)?
            };
            let b = terms.breakdown();
            if !b.total.is_finite() {
                return Err(Error::domain(format!("training diverged at step {}", step + 1)));
            }
            if b.empty_mask_warning {
                log::warn!("step {}: a warp left no valid pixels", step + 1);
            }
            let mut grads = terms.total.backward();
            let gm = binder.collect(&mut grads);
            drop(terms);
            opt.step(&mut params.trainable(), &gm)?;
            step += 1;
            let rec = StepRecord { step, epoch, loss: b };
            observer.on_step(&rec)?;
            log.push(rec);
        }
        epoch += 1;
        observer.on_epoch(epoch, &params, &opt, step)?;
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        log,
        steps: step,
    })
}

/// Loss over the whole dataset with poses fixed at their posterior means,
/// averaged over triplets. Deterministic, so runs can be compared.
pub fn dataset_loss(
    dataset: &[FrameTriplet],
    model: &Model,
    params: &ModelParams,
    use_bank: bool,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(Error::domain("dataset is empty"));
    }
    let cfg = LossConfig {
        sample_poses: false,
        ..*cfg
    };
    let mut acc: Option<LossBreakdown> = None;
    for t in dataset {
        let frames = TripletTensors::from_triplets(&[t])?;
        let binder = Binder::inference();
        let s = Bound::new(&binder, params);
        let b = model
            .loss(&s, &frames, &t.intrinsics, use_bank, &cfg, &mut rng_from_seed(0))?
            .breakdown();
        acc = Some(match acc {
            None => b,
            Some(mut a) => {
                a.reproj_minus += b.reproj_minus;
                a.reproj_plus += b.reproj_plus;
                a.kl += b.kl;
                a.total += b.total;
                for (x, y) in a.per_scale.iter_mut().zip(&b.per_scale) {
                    *x += y;
                }
                a.empty_mask_warning |= b.empty_mask_warning;
                a
            }
        });
    }
    let mut a = acc.expect("dataset is non-empty");
    let n = dataset.len() as f64;
    a.reproj_minus /= n;
    a.reproj_plus /= n;
    a.kl /= n;
    a.total /= n;
    a.per_scale.iter_mut().for_each(|v| *v /= n);
    Ok(a)
}

/// Trailing moving average of the total loss ending at `step` (1-based).
pub fn moving_average(log: &[StepRecord], step: usize, window: usize) -> f64 {
    let end = step.min(log.len());
    let start = end.saturating_sub(window.max(1));
    let s = &log[start..end];
    s.iter().map(|r| r.loss.total).sum::<f64>() / s.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{render_scene, Sequence, SyntheticSceneSpec};
    use rand::{Rng, SeedableRng};

    fn scene_triplets(frames: usize, side: usize) -> Vec<FrameTriplet> {
        let spec = SyntheticSceneSpec {
            frames,
            width: side,
            height: side,
            focal: side as f64 * 0.75,
            ..Default::default()
        };
        let s = render_scene(&spec, false).unwrap();
        let seq = Sequence {
            names: vec![],
            frames: s.images,
            depths: Some(s.depths),
            poses: Some(s.poses),
            intrinsics: s.intrinsics,
            max_depth: s.max_depth,
        };
        seq.triplets().collect()
    }

    fn gt_prediction(t: &FrameTriplet) -> DepthPrediction {
        let d = t.gt_depth.as_ref().unwrap().to_tensor();
        let (_, _, h, w) = d.dims4();
        let depth: Vec<Tensor> = (0..NUM_SCALES_TEST).map(|i| d.resize_bilinear(h >> i, w >> i)).collect();
        DepthPrediction { sigmoid: vec![], depth }
    }

    const NUM_SCALES_TEST: usize = crate::depth_net::NUM_SCALES;

    fn gt_dists(t: &FrameTriplet, lv: f64) -> (PoseDistribution, PoseDistribution) {
        let (m, p) = t.gt_rel.unwrap();
        let prior = PosePrior::default();
        (
            PoseDistribution::new(m.to_array(), [lv; 6], &prior).unwrap(),
            PoseDistribution::new(p.to_array(), [lv; 6], &prior).unwrap(),
        )
    }

    #[test]
    fn reprojection_loss_basic_values() {
        let x = Tensor::from_vec((0..48).map(|i| i as f64 / 48.0).collect(), &[1, 3, 4, 4]);
        let ones = Tensor::full(&[1, 1, 4, 4], 1.0);
        let (l, e) = reprojection_loss(&x, &x, &ones);
        assert_eq!((l.item(), e), (0.0, false));
        let (l, _) = reprojection_loss(&x.add_scalar(0.1), &x, &ones);
        assert!((l.item() - 0.01).abs() < 1e-15);
        let (l, e) = reprojection_loss(&x.add_scalar(0.1), &x, &Tensor::zeros(&[1, 1, 4, 4]));
        assert_eq!((l.item(), e), (0.0, true));
        // (0.1² + 0.3² + 0.4²) / 3 over the unmasked pixels
        let w = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4], &[1, 1, 2, 2]);
        let m = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0], &[1, 1, 2, 2]);
        let (l, _) = reprojection_loss(&w, &Tensor::zeros(&[1, 1, 2, 2]), &m);
        assert!((l.item() - 0.26 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reprojection_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 2 * 3 * 4 * 4;
            let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let m: Vec<f64> = (0..32).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for bi in 0..2 {
                for p in 0..16 {
                    if m[bi * 16 + p] == 1.0 {
                        cnt += 1.0;
                        for c in 0..3 {
                            let i = (bi * 3 + c) * 16 + p;
                            acc += (a[i] - b[i]).powi(2) / 3.0;
                        }
                    }
                }
            }
            let (l, _) = reprojection_loss(
                &Tensor::from_vec(a, &[2, 3, 4, 4]),
                &Tensor::from_vec(b, &[2, 3, 4, 4]),
                &Tensor::from_vec(m, &[2, 1, 4, 4]),
            );
            let want = if cnt > 0.0 { acc / cnt } else { 0.0 };
            assert!((l.item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_truth_inputs_give_small_loss_and_terms_add_up() {
        let ts = scene_triplets(4, 32);
        for t in &ts {
            let pred = gt_prediction(t);
            let (qm, qp) = gt_dists(t, -8.0);
            let cfg = LossConfig {
                sample_poses: false,
                ..Default::default()
            };
            let b = total_loss(t, &pred, &qm, &qp, &cfg, 0).unwrap();
            assert!(b.reproj_minus < 1e-3 && b.reproj_plus < 1e-3, "{b:?}");
            let kl = qm.kl_to_prior() + qp.kl_to_prior();
            assert!((b.kl - kl).abs() < 1e-9 * kl.max(1.0));
            assert!((b.total - (b.reproj_minus + b.reproj_plus + 1e-3 * b.kl)).abs() < 1e-15);
            assert_eq!(b.per_scale.len(), NUM_SCALES_TEST);
            let mean_scale = b.per_scale.iter().sum::<f64>() / NUM_SCALES_TEST as f64;
            assert!((mean_scale - (b.reproj_minus + b.reproj_plus)).abs() < 1e-12);

            let zero_beta = total_loss(t, &pred, &qm, &qp, &LossConfig { beta: 0.0, ..cfg }, 0).unwrap();
            assert_eq!(zero_beta.total, zero_beta.reproj_minus + zero_beta.reproj_plus);
            let no_vae = total_loss(t, &pred, &qm, &qp, &LossConfig { use_vae: false, ..cfg }, 0).unwrap();
            assert_eq!(no_vae.kl, 0.0);
            assert_eq!(no_vae.total, no_vae.reproj_minus + no_vae.reproj_plus);
        }
    }

    #[test]
    fn min_over_sources_splits_additively() {
        let t = &scene_triplets(3, 32)[0];
        let pred = gt_prediction(t);
        let (qm, qp) = gt_dists(t, -8.0);
        let base = LossConfig {
            sample_poses: false,
            ..Default::default()
        };
        let sum = total_loss(t, &pred, &qm, &qp, &base, 0).unwrap();
        let min = total_loss(t, &pred, &qm, &qp, &LossConfig { photometric: Photometric::MinOverSources, ..base }, 0).unwrap();
        assert!((min.total - (min.reproj_minus + min.reproj_plus + base.beta * min.kl)).abs() < 1e-15);
        assert!(min.reproj_minus + min.reproj_plus <= sum.reproj_minus + sum.reproj_plus);
    }

    #[test]
    fn wrong_pose_costs_more_than_ground_truth() {
        let t = &scene_triplets(3, 32)[0];
        let pred = gt_prediction(t);
        let (qm, qp) = gt_dists(t, -8.0);
        let cfg = LossConfig {
            sample_poses: false,
            use_vae: false,
            ..Default::default()
        };
        let good = total_loss(t, &pred, &qm, &qp, &cfg, 0).unwrap();
        let mut bad_m = qm;
        bad_m.mean[3] += 0.2;
        let bad = total_loss(t, &pred, &bad_m, &qp, &cfg, 0).unwrap();
        assert!(bad.reproj_minus > 2.0 * good.reproj_minus, "{} vs {}", bad.reproj_minus, good.reproj_minus);
        assert_eq!(bad.reproj_plus, good.reproj_plus);
    }

    fn smooth_frames(h: usize, w: usize) -> TripletTensors {
        let img = |phase: f64| {
            let mut v = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (xf, yf) = (x as f64, y as f64);
                        v.push(0.5 + 0.3 * (0.7 * xf + 0.4 * yf + phase + c as f64).sin() * (0.5 * yf - 0.2 * xf).cos());
                    }
                }
            }
            Tensor::from_vec(v, &[1, 3, h, w])
        };
        TripletTensors {
            prev: img(0.3),
            cur: img(0.0),
            next: img(-0.25),
        }
    }

    fn rel_close(a: f64, n: f64) -> bool {
        (a - n).abs() <= 1e-3 * a.abs().max(n.abs()) + 1e-9
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (h, w) = (8, 8);
        let frames = smooth_frames(h, w);
        let k = CameraIntrinsics::centered(6.0, w, h).unwrap();
        let depth0: Vec<f64> = (0..h * w).map(|i| 2.0 + 0.3 * ((i * 7) % 11) as f64 / 11.0).collect();
        let mean0 = [0.01, -0.02, 0.015, 0.05, -0.03, 0.1];
        let plus = [-0.01, 0.02, -0.01, -0.04, 0.02, -0.1];
        let prior = PosePrior::default();
        let cfg = LossConfig {
            beta: 0.5,
            ..Default::default()
        };
        let eval = |depth: &[f64], mean: &[f64; 6], lv: &[f64; 6]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let d = Tensor::var(depth.to_vec(), &[1, 1, h, w]);
            let m = Tensor::var(mean.to_vec(), &[1, 6]);
            let l = Tensor::var(lv.to_vec(), &[1, 6]);
            let pred = DepthPrediction {
                sigmoid: vec![],
                depth: vec![d.clone(), d.resize_bilinear(h / 2, w / 2)],
            };
            let qm = PoseDistTensor {
                mean: m.clone(),
                log_variance: l.clone(),
                scale: prior.scales(),
            };
            let qp = PoseDistTensor {
                mean: Tensor::from_vec(plus.to_vec(), &[1, 6]),
                log_variance: Tensor::full(&[1, 6], -6.0),
                scale: prior.scales(),
            };
            let terms = total_loss_terms(&frames, &k, &pred, &qm, &qp, &cfg, &mut rng_from_seed(9)).unwrap();
            let g = terms.total.backward();
            (
                terms.total.item(),
                g.get(&d).unwrap().to_vec(),
                g.get(&m).unwrap().to_vec(),
                g.get(&l).unwrap().to_vec(),
            )
        };
        let lv0 = [-6.0, -5.0, -6.5, -7.0, -6.0, -5.5];
        let (_, gd, gm, gl) = eval(&depth0, &mean0, &lv0);
        let eps = 1e-6;
        for i in (0..h * w).step_by(5) {
            let mut a = depth0.clone();
            let mut b = depth0.clone();
            a[i] += eps;
            b[i] -= eps;
            let n = (eval(&a, &mean0, &lv0).0 - eval(&b, &mean0, &lv0).0) / (2.0 * eps);
            assert!(rel_close(gd[i], n), "depth {i}: {} vs {n}", gd[i]);
        }
        for j in 0..6 {
            let mut a = mean0;
            let mut b = mean0;
            a[j] += eps;
            b[j] -= eps;
            let n = (eval(&depth0, &a, &lv0).0 - eval(&depth0, &b, &lv0).0) / (2.0 * eps);
            assert!(rel_close(gm[j], n), "mean {j}: {} vs {n}", gm[j]);
            let mut a = lv0;
            let mut b = lv0;
            a[j] += eps;
            b[j] -= eps;
            let n = (eval(&depth0, &mean0, &a).0 - eval(&depth0, &mean0, &b).0) / (2.0 * eps);
            assert!(rel_close(gl[j], n), "logvar {j}: {} vs {n}", gl[j]);
        }
    }

    fn tiny_setup() -> (Model, ModelParams, Vec<FrameTriplet>, TrainConfig) {
        let model = Model::new(&ModelConfig::toy()).unwrap();
        let params = model.init(1);
        let data = scene_triplets(4, 64);
        let cfg = TrainConfig {
            batch_size: 2,
            lr: 1e-3,
            max_steps: Some(2),
            seed: 4,
            ..Default::default()
        };
        (model, params, data, cfg)
    }

    #[test]
    fn training_leaves_the_bank_untouched_and_is_deterministic() {
        let (model, params, data, cfg) = tiny_setup();
        let before = params.clone();
        let a = train(&data, &model, params.clone(), &cfg, &mut ()).unwrap();
        let b = train(&data, &model, params, &cfg, &mut ()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.steps, 2);
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.latent_bank.digest(), before.latent_bank.digest());
        assert!(a.params.latent_bank.is_frozen());
        assert_ne!(a.params.depth_encoder.digest(), before.depth_encoder.digest());
        assert_ne!(a.params.adin_trainable.digest(), before.adin_trainable.digest());
        assert_ne!(a.params.pose_encoder.digest(), before.pose_encoder.digest());
    }

    #[test]
    fn bank_off_leaves_adapter_untouched() {
        let (model, params, data, cfg) = tiny_setup();
        let cfg = TrainConfig {
            use_latent_bank: false,
            ..cfg
        };
        let out = train(&data, &model, params.clone(), &cfg, &mut ()).unwrap();
        assert_eq!(out.params.adin_trainable, params.adin_trainable);
        assert_ne!(out.params.depth_decoder, params.depth_decoder);
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let (model, params, data, cfg) = tiny_setup();
        assert!(matches!(train(&[], &model, params.clone(), &cfg, &mut ()), Err(Error::Domain(_))));
        let mut thawed = params.clone();
        thawed.latent_bank = model.generator.init(&mut rng_from_seed(0));
        assert!(matches!(train(&data, &model, thawed, &cfg, &mut ()), Err(Error::Domain(_))));
        let bad = TrainConfig { lr: 0.0, ..cfg };
        assert!(matches!(train(&data, &model, params, &bad, &mut ()), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_loss_is_deterministic() {
        let (model, params, data, cfg) = tiny_setup();
        let a = dataset_loss(&data, &model, &params, true, &cfg.loss).unwrap();
        let b = dataset_loss(&data, &model, &params, true, &cfg.loss).unwrap();
        assert_eq!(a, b);
        assert!((a.total - (a.reproj_minus + a.reproj_plus + cfg.loss.beta * a.kl)).abs() < 1e-12);
        let off = dataset_loss(&data, &model, &params, false, &LossConfig { use_vae: false, ..cfg.loss }).unwrap();
        assert_eq!(off.kl, 0.0);
    }

    #[test]
    fn moving_average_window() {
        let log: Vec<StepRecord> = (1..=5)
            .map(|s| StepRecord {
                step: s,
                epoch: 0,
                loss: LossBreakdown {
                    reproj_minus: 0.0,
                    reproj_plus: 0.0,
                    kl: 0.0,
                    total: s as f64,
                    per_scale: vec![],
                    empty_mask_warning: false,
                },
            })
            .collect();
        assert_eq!(moving_average(&log, 5, 2), 4.5);
        assert_eq!(moving_average(&log, 2, 10), 1.5);
    }

    #[test]
    fn learning_rate_steps_down_once() {
        assert_eq!(TrainConfig::default().lr_at(99, 100), 1e-4);
        let cfg = TrainConfig {
            lr_decay: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0, 100), 1e-4);
        assert_eq!(cfg.lr_at(74, 100), 1e-4);
        assert!((cfg.lr_at(75, 100) - 1e-5).abs() < 1e-20);
        assert!(TrainConfig { lr_decay: 0.0, ..cfg }.validate().is_err());
    }
}
