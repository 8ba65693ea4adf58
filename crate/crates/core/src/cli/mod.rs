//! The `endodepth` command line: argument parsing, exit codes and the
//! subcommands.

mod commands;
mod config;

pub use commands::load_trained;
pub use config::{variant_label, Preset, RunConfig};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval_metrics::ScalingMode;

/// Exit status for invalid configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status when an input file or directory does not exist.
pub const EXIT_MISSING: i32 = 3;
/// Exit status for any other failure.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "endodepth", version, about = "Self-supervised depth and pose for endoscopic video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory; every output lands here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override any config key, e.g. `--set max_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the generator that becomes the latent bank.
    PretrainBank {
        #[command(flatten)]
        common: Common,
    },
    /// Train the depth and pose networks on a sequence.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_latent_bank: bool,
        #[arg(long)]
        no_vae: bool,
        /// Weight of the KL term.
        #[arg(long, value_name = "F")]
        beta: Option<f64>,
    },
    /// Score a checkpoint or precomputed depth against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "median|none")]
        scaling: Option<ScalingMode>,
    },
    /// Write depth maps and a trajectory for a sequence.
    Infer {
        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic tube sequence with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Plot camera trajectories from pose files.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Camera-to-world pose files; may repeat.
        #[arg(long = "poses", value_name = "PATH")]
        poses: Vec<PathBuf>,
    },
}

/// Merges defaults, the config file and flags, in increasing precedence.
pub fn resolve(common: &Common, overrides: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainBank { common } => commands::pretrain_bank(&resolve(&common, &[])?),
        Command::Train {
            common,
            no_latent_bank,
            no_vae,
            beta,
        } => {
            let mut o = Vec::new();
            if no_latent_bank {
                o.push(("use_latent_bank", "false".to_string()));
            }
            if no_vae {
                o.push(("use_vae", "false".to_string()));
            }
            if let Some(b) = beta {
                o.push(("beta", format!("{b:?}")));
            }
            commands::train(&resolve(&common, &o)?)
        }
        Command::Eval { common, scaling } => {
            let o: Vec<_> = scaling.iter().map(|s| ("scaling", s.to_string())).collect();
            commands::eval(&resolve(&common, &o)?)
        }
        Command::Infer { common } => commands::infer(&resolve(&common, &[])?),
        Command::Synth { common } => commands::synth(&resolve(&common, &[])?),
        Command::Plot { common, poses } => {
            let mut cfg = resolve(&common, &[])?;
            if !poses.is_empty() {
                cfg.trajectories = poses;
            }
            commands::plot(&cfg)
        }
    }
}
