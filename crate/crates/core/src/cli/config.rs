//! Run configuration: defaults, a flat `key = value` file and flag
//! overrides, applied in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data_io::SyntheticSceneSpec;
use crate::depth_net::{DepthNetConfig, DepthScaleConfig};
use crate::error::{Error, Result};
use crate::eval_metrics::ScalingMode;
use crate::kv;
use crate::latent_bank::{GeneratorConfig, PretrainConfig};
use crate::pose_net::{PoseNetConfig, PosePrior};
use crate::training::{LossConfig, ModelConfig, Photometric, TrainConfig};

/// Architecture preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-size networks for 480×480 input.
    Full,
    /// Narrow networks for 64×64 input.
    Toy,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!("model preset `{s}` (expected full|toy)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: Preset,
    pub min_depth: f64,
    pub max_depth: f64,
    pub rotation_prior_scale: f64,
    pub translation_prior_scale: f64,
    pub init_log_variance: f64,

    pub manifest: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pred_depth_dir: Option<PathBuf>,
    pub pred_poses: Option<PathBuf>,
    pub trajectories: Vec<PathBuf>,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_at: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub checkpoint_every: usize,
    pub beta: f64,
    pub use_latent_bank: bool,
    pub use_vae: bool,
    pub sample_poses: bool,
    pub photometric: Photometric,

    pub pretrain_steps: usize,
    pub n_critic: usize,
    pub pretrain_batch_size: usize,
    pub gp_weight: f64,
    pub pretrain_lr: f64,
    pub start_resolution: usize,
    pub samples: usize,

    pub scaling: ScalingMode,

    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub tube_radius: f64,
    pub radius_amplitude: f64,
    pub radius_period: f64,
    pub tube_length: f64,
    pub texture_seed: Option<u64>,
    pub start_z: f64,
    pub step: f64,
    pub sway_x: f64,
    pub sway_y: f64,
    pub sway_period: f64,
    pub follow_path: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = PretrainConfig::toy();
        let s = SyntheticSceneSpec::default();
        let prior = PosePrior::default();
        let scale = DepthScaleConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            model: Preset::Full,
            min_depth: scale.min_depth,
            max_depth: scale.max_depth,
            rotation_prior_scale: prior.rotation_scale,
            translation_prior_scale: prior.translation_scale,
            init_log_variance: PoseNetConfig::default().init_log_variance,
            manifest: None,
            corpus: None,
            bank: None,
            checkpoint: None,
            pred_depth_dir: None,
            pred_poses: None,
            trajectories: Vec::new(),
            batch_size: t.batch_size,
            learning_rate: t.lr,
            lr_decay: t.lr_decay,
            lr_decay_at: t.lr_decay_at,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            max_steps: None,
            checkpoint_every: 1,
            beta: t.loss.beta,
            use_latent_bank: true,
            use_vae: true,
            sample_poses: true,
            photometric: Photometric::Sum,
            pretrain_steps: p.steps,
            n_critic: p.n_critic,
            pretrain_batch_size: p.batch_size,
            gp_weight: p.gamma,
            pretrain_lr: p.lr,
            start_resolution: 0,
            samples: 16,
            scaling: ScalingMode::Median,
            frames: s.frames,
            width: s.width,
            height: s.height,
            focal: s.focal,
            tube_radius: s.radius,
            radius_amplitude: s.radius_amplitude,
            radius_period: s.radius_period,
            tube_length: s.length,
            texture_seed: None,
            start_z: s.start_z,
            step: s.step,
            sway_x: s.sway[0],
            sway_y: s.sway[1],
            sway_period: s.sway_period,
            follow_path: s.follow_path,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected a boolean, got `{v}`"))),
    }
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

fn photometric_name(p: Photometric) -> &'static str {
    match p {
        Photometric::Sum => "sum",
        Photometric::MinOverSources => "min",
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "model" => self.model = v.parse()?,
            "min_depth" => self.min_depth = parse(key, v)?,
            "max_depth" => self.max_depth = parse(key, v)?,
            "rotation_prior_scale" => self.rotation_prior_scale = parse(key, v)?,
            "translation_prior_scale" => self.translation_prior_scale = parse(key, v)?,
            "init_log_variance" => self.init_log_variance = parse(key, v)?,
            "manifest" => self.manifest = opt(key, v)?,
            "corpus" => self.corpus = opt(key, v)?,
            "bank" => self.bank = opt(key, v)?,
            "checkpoint" => self.checkpoint = opt(key, v)?,
            "pred_depth_dir" => self.pred_depth_dir = opt(key, v)?,
            "pred_poses" => self.pred_poses = opt(key, v)?,
            "trajectories" => {
                self.trajectories = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    kv::parse_list(key, v)?
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_decay_at" => self.lr_decay_at = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = opt(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "use_latent_bank" => self.use_latent_bank = parse_bool(key, v)?,
            "use_vae" => self.use_vae = parse_bool(key, v)?,
            "sample_poses" => self.sample_poses = parse_bool(key, v)?,
            "photometric" => self.photometric = v.parse()?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "n_critic" => self.n_critic = parse(key, v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(key, v)?,
            "gp_weight" => self.gp_weight = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "start_resolution" => self.start_resolution = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "scaling" => self.scaling = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "frames" => self.frames = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "focal" => self.focal = parse(key, v)?,
            "tube_radius" => self.tube_radius = parse(key, v)?,
            "radius_amplitude" => self.radius_amplitude = parse(key, v)?,
            "radius_period" => self.radius_period = parse(key, v)?,
            "tube_length" => self.tube_length = parse(key, v)?,
            "texture_seed" => self.texture_seed = opt(key, v)?,
            "start_z" => self.start_z = parse(key, v)?,
            "step" => self.step = parse(key, v)?,
            "sway_x" => self.sway_x = parse(key, v)?,
            "sway_y" => self.sway_y = parse(key, v)?,
            "sway_period" => self.sway_period = parse(key, v)?,
            "follow_path" => self.follow_path = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:?}");
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("model", self.model.to_string()),
            ("min_depth", f(self.min_depth)),
            ("max_depth", f(self.max_depth)),
            ("rotation_prior_scale", f(self.rotation_prior_scale)),
            ("translation_prior_scale", f(self.translation_prior_scale)),
            ("init_log_variance", f(self.init_log_variance)),
            ("manifest", show_path(&self.manifest)),
            ("corpus", show_path(&self.corpus)),
            ("bank", show_path(&self.bank)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("pred_depth_dir", show_path(&self.pred_depth_dir)),
            ("pred_poses", show_path(&self.pred_poses)),
            (
                "trajectories",
                if self.trajectories.is_empty() {
                    "none".into()
                } else {
                    self.trajectories.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
                },
            ),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", f(self.learning_rate)),
            ("lr_decay", f(self.lr_decay)),
            ("lr_decay_at", f(self.lr_decay_at)),
            ("weight_decay", f(self.weight_decay)),
            ("epochs", self.epochs.to_string()),
            ("max_steps", show_opt(&self.max_steps)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("beta", f(self.beta)),
            ("use_latent_bank", self.use_latent_bank.to_string()),
            ("use_vae", self.use_vae.to_string()),
            ("sample_poses", self.sample_poses.to_string()),
            ("photometric", photometric_name(self.photometric).into()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("n_critic", self.n_critic.to_string()),
            ("pretrain_batch_size", self.pretrain_batch_size.to_string()),
            ("gp_weight", f(self.gp_weight)),
            ("pretrain_lr", f(self.pretrain_lr)),
            ("start_resolution", self.start_resolution.to_string()),
            ("samples", self.samples.to_string()),
            ("scaling", self.scaling.to_string()),
            ("frames", self.frames.to_string()),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("focal", f(self.focal)),
            ("tube_radius", f(self.tube_radius)),
            ("radius_amplitude", f(self.radius_amplitude)),
            ("radius_period", f(self.radius_period)),
            ("tube_length", f(self.tube_length)),
            ("texture_seed", show_opt(&self.texture_seed)),
            ("start_z", f(self.start_z)),
            ("step", f(self.step)),
            ("sway_x", f(self.sway_x)),
            ("sway_y", f(self.sway_y)),
            ("sway_period", f(self.sway_period)),
            ("follow_path", self.follow_path.to_string()),
        ]
    }

    pub fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults overlaid with a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_map(&kv::read(path)?)?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        kv::render(self.entries())
    }

    /// The settings that shape a trained model, for checkpoint snapshots.
    /// Output location is left out so snapshots do not depend on it.
    pub fn snapshot(&self) -> serde_json::Value {
        let map: BTreeMap<&str, String> = self.entries().into_iter().filter(|(k, _)| *k != "out").collect();
        serde_json::to_value(map).expect("string map serializes")
    }

    pub fn from_snapshot(v: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_value(v.clone())
            .map_err(|e| Error::Format(format!("checkpoint config snapshot: {e}")))?;
        let mut cfg = RunConfig::default();
        cfg.apply_map(&map)?;
        Ok(cfg)
    }

    pub fn depth_scale(&self) -> DepthScaleConfig {
        DepthScaleConfig {
            min_depth: self.min_depth,
            max_depth: self.max_depth,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let (depth, generator, mut pose) = match self.model {
            Preset::Full => (DepthNetConfig::default(), GeneratorConfig::full_scale(), PoseNetConfig::default()),
            Preset::Toy => (DepthNetConfig::toy(), GeneratorConfig::toy(), PoseNetConfig::toy()),
        };
        pose.prior = PosePrior {
            rotation_scale: self.rotation_prior_scale,
            translation_scale: self.translation_prior_scale,
        };
        pose.init_log_variance = self.init_log_variance;
        let mc = ModelConfig {
            depth: DepthNetConfig {
                scale: self.depth_scale(),
                ..depth
            },
            generator,
            pose,
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        let t = TrainConfig {
            batch_size: self.batch_size,
            lr: self.learning_rate,
            lr_decay: self.lr_decay,
            lr_decay_at: self.lr_decay_at,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            max_steps: self.max_steps,
            use_latent_bank: self.use_latent_bank,
            loss: LossConfig {
                beta: self.beta,
                use_vae: self.use_vae,
                sample_poses: self.sample_poses,
                photometric: self.photometric,
            },
            seed: self.seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn pretrain_config(&self, mc: &ModelConfig) -> Result<PretrainConfig> {
        let critic_channels = match self.model {
            Preset::Toy => PretrainConfig::toy().critic_channels,
            Preset::Full => mc.generator.channels.clone(),
        };
        let start = if self.start_resolution == 0 {
            mc.generator.base_resolution
        } else {
            self.start_resolution
        };
        let p = PretrainConfig {
            resolution: mc.bank_resolution(),
            start_resolution: start,
            steps: self.pretrain_steps,
            n_critic: self.n_critic,
            batch_size: self.pretrain_batch_size,
            gamma: self.gp_weight,
            lr: self.pretrain_lr,
            critic_channels,
            seed: self.seed,
            ..PretrainConfig::toy()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn scene_spec(&self) -> Result<SyntheticSceneSpec> {
        let s = SyntheticSceneSpec {
            frames: self.frames,
            width: self.width,
            height: self.height,
            focal: self.focal,
            radius: self.tube_radius,
            radius_amplitude: self.radius_amplitude,
            radius_period: self.radius_period,
            length: self.tube_length,
            texture_seed: self.texture_seed.unwrap_or(self.seed),
            start_z: self.start_z,
            step: self.step,
            sway: [self.sway_x, self.sway_y],
            sway_period: self.sway_period,
            follow_path: self.follow_path,
            max_depth: self.max_depth,
        };
        s.validate()?;
        Ok(s)
    }

    /// Ablation label of the enabled components.
    pub fn variant(&self) -> &'static str {
        variant_label(self.use_latent_bank, self.use_vae)
    }
}

pub fn variant_label(bank: bool, vae: bool) -> &'static str {
    match (bank, vae) {
        (true, true) => "Ours(full)",
        (false, true) => "Ours w/o Latent Bank",
        (true, false) => "Ours w/o Vae",
        (false, false) => "Ours w/o Vae and Latent Bank",
    }
}
