use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::data_io::{
    file_sha256, generate_synthetic_scene, load_checkpoint, load_depth_corpus, load_sequence, read_depth, read_poses,
    relative_pose, save_checkpoint, write_depth, write_map_grid, write_poses, write_record, CheckpointBundle,
    Sequence, SequenceManifest,
};
use crate::error::{Error, Result};
use crate::eval_metrics::{
    accumulate_trajectory, depth_metrics, metrics_record, pose_metrics, trajectory_table, write_trajectory_plot,
    DepthMetrics,
};
use crate::geometry::{Pose6, Se3};
use crate::latent_bank::{distinct_pair_fraction, pairwise_spread, pretrain, sample_latents, Generator, StageCheckpoint};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::raster::DepthMap;
use crate::training::{self, dataset_loss, moving_average, FrameTriplet, Model, ModelParams, StepRecord, TrainObserver};

const GAP_WINDOW: usize = 20;
const GRID_COLUMNS: usize = 4;

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set (config file or --set {key}=PATH)")))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let p = cfg.out.join("config.effective");
    std::fs::write(&p, cfg.render()).map_err(|e| Error::io(&p, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json_line<T: serde::Serialize>(w: &mut impl Write, path: &Path, v: &T) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn frozen(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    s.freeze();
    s
}

fn bank_bundle(cfg: &RunConfig, generator: &ParamStore, critic: Option<&ParamStore>, opt: Adam, step: usize) -> CheckpointBundle {
    let mut groups = BTreeMap::new();
    groups.insert("latent_bank".to_string(), frozen(generator));
    if let Some(c) = critic {
        groups.insert("critic".to_string(), c.clone());
    }
    CheckpointBundle {
        groups,
        optimizer: opt,
        config: cfg.snapshot(),
        step: step as u64,
    }
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scene_spec()?;
    prepare_out(cfg)?;
    let (scene, manifest) = generate_synthetic_scene(&spec, &cfg.out)?;
    println!(
        "wrote {} frames ({}x{}) and {}",
        scene.images.len(),
        spec.width,
        spec.height,
        manifest.display()
    );
    Ok(())
}

fn sample_maps(gen: &Generator, store: &ParamStore, cfg: &RunConfig, resolution: usize) -> Result<Vec<DepthMap>> {
    let z = sample_latents(cfg.seed.wrapping_add(0x5EED), cfg.samples.max(1), gen.cfg.latent_dim);
    let dim = gen.cfg.latent_dim;
    (0..cfg.samples.max(1))
        .map(|i| gen.generate(store, &z.data()[i * dim..(i + 1) * dim], cfg.seed.wrapping_add(i as u64), resolution))
        .collect()
}

pub fn pretrain_bank(cfg: &RunConfig) -> Result<()> {
    let corpus_dir = require(&cfg.corpus, "corpus")?;
    if !corpus_dir.is_dir() {
        return Err(Error::Config(format!("corpus directory {} does not exist", corpus_dir.display())));
    }
    let mc = cfg.model_config()?;
    let pcfg = cfg.pretrain_config(&mc)?;
    let corpus = load_depth_corpus(corpus_dir)?;
    prepare_out(cfg)?;
    let gen = Generator::new(&mc.generator);
    log::info!(
        "pretraining on {} maps, {} steps, {}→{} px",
        corpus.len(),
        pcfg.steps,
        pcfg.start_resolution,
        pcfg.resolution
    );
    let on_stage = |c: &StageCheckpoint| -> Result<()> {
        let name = format!("stage{}_{}px", c.stage, c.resolution);
        let adam = Adam::new(AdamConfig::default());
        save_checkpoint(
            &bank_bundle(cfg, &c.generator, None, adam, c.step),
            &cfg.out.join(format!("{name}.ckpt")),
        )?;
        let maps = sample_maps(&gen, &c.generator, cfg, c.resolution)?;
        write_map_grid(&cfg.out.join(format!("samples_{name}.png")), &maps, GRID_COLUMNS)?;
        log::info!("stage {} ({} px) done at step {}", c.stage, c.resolution, c.step);
        Ok(())
    };
    let out = pretrain(&gen, &corpus, &pcfg, on_stage)?;

    let log_path = cfg.out.join("pretrain_log.jsonl");
    let mut w = create(&log_path)?;
    for r in &out.log.records {
        write_json_line(&mut w, &log_path, r)?;
    }
    w.flush().map_err(|e| Error::io(&log_path, e))?;

    let bank_path = cfg.out.join("bank.ckpt");
    save_checkpoint(
        &bank_bundle(cfg, &out.generator, Some(&out.critic), out.generator_optimizer.clone(), pcfg.steps),
        &bank_path,
    )?;
    let samples = sample_maps(&gen, &out.generator, cfg, pcfg.resolution)?;
    write_map_grid(&cfg.out.join("samples.png"), &samples, GRID_COLUMNS)?;

    let smoothed = out.log.smoothed_gap(GAP_WINDOW);
    let max_gap = smoothed.iter().cloned().fold(0.0, f64::max);
    let final_gap = smoothed.last().copied().unwrap_or(0.0);
    let real: Vec<DepthMap> = corpus
        .iter()
        .map(|m| {
            let t = m.to_tensor().resize_bilinear(pcfg.resolution, pcfg.resolution);
            DepthMap::from_tensor(&t).remove(0)
        })
        .collect();
    let spread = pairwise_spread(&samples);
    let real_spread = pairwise_spread(&real);
    let mut rec = BTreeMap::new();
    rec.insert("steps".to_string(), pcfg.steps.to_string());
    rec.insert("max_smoothed_gap".into(), fmt(max_gap));
    rec.insert("final_smoothed_gap".into(), fmt(final_gap));
    rec.insert(
        "gap_reduction".into(),
        fmt(if max_gap > 0.0 { 1.0 - final_gap / max_gap } else { 0.0 }),
    );
    rec.insert("distinct_fraction".into(), fmt(distinct_pair_fraction(&samples)));
    rec.insert("sample_spread".into(), fmt(spread));
    rec.insert("corpus_spread".into(), fmt(real_spread));
    rec.insert("bank_sha256".into(), file_sha256(&bank_path)?);
    write_record(&cfg.out.join("pretrain_summary.txt"), &rec)?;
    println!("bank written to {}", bank_path.display());
    for (k, v) in &rec {
        println!("{k} = {v}");
    }
    Ok(())
}

fn load_manifest_sequence(cfg: &RunConfig) -> Result<Sequence> {
    let m = SequenceManifest::read(require(&cfg.manifest, "manifest")?)?;
    load_sequence(&m)
}

struct LogWriter<'a> {
    cfg: &'a RunConfig,
    path: PathBuf,
    w: BufWriter<File>,
}

impl TrainObserver for LogWriter<'_> {
    fn on_step(&mut self, rec: &StepRecord) -> Result<()> {
        write_json_line(&mut self.w, &self.path, rec)?;
        if rec.step % 50 == 0 {
            log::info!("step {} total {:.3e}", rec.step, rec.loss.total);
        }
        Ok(())
    }

    fn on_epoch(&mut self, epoch: usize, params: &ModelParams, opt: &Adam, step: usize) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        if epoch % self.cfg.checkpoint_every == 0 {
            let b = CheckpointBundle {
                groups: params.clone().into_groups(),
                optimizer: opt.clone(),
                config: self.cfg.snapshot(),
                step: step as u64,
            };
            save_checkpoint(&b, &self.cfg.out.join(format!("epoch{epoch:04}.ckpt")))?;
        }
        Ok(())
    }
}

fn check_resolution(mc: &crate::training::ModelConfig, seq: &Sequence) -> Result<()> {
    let r = mc.bank_resolution();
    if (seq.intrinsics.width, seq.intrinsics.height) != (r, r) {
        return Err(Error::Config(format!(
            "frames are {}x{}, this model preset expects {r}x{r}",
            seq.intrinsics.width, seq.intrinsics.height
        )));
    }
    Ok(())
}

pub fn train_cmd_inputs(cfg: &RunConfig) -> Result<(Model, ModelParams, Vec<FrameTriplet>)> {
    let mc = cfg.model_config()?;
    cfg.train_config()?;
    let seq = load_manifest_sequence(cfg)?;
    check_resolution(&mc, &seq)?;
    let model = Model::new(&mc)?;
    let mut params = model.init(cfg.seed);
    if cfg.use_latent_bank {
        match &cfg.bank {
            Some(p) => {
                let b = load_checkpoint(p)?;
                let g = b.group("latent_bank")?;
                params.latent_bank.check_layout(g, "latent_bank")?;
                params.latent_bank = frozen(g);
            }
            None => {
                log::warn!("no pretrained bank given; the latent bank keeps its random initialisation");
                params.latent_bank.freeze();
            }
        }
    }
    Ok((model, params, seq.triplets().collect()))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let tcfg = cfg.train_config()?;
    let (model, params, data) = train_cmd_inputs(cfg)?;
    prepare_out(cfg)?;
    log::info!("training {} on {} triplets", cfg.variant(), data.len());
    let path = cfg.out.join("train_log.jsonl");
    let mut obs = LogWriter {
        cfg,
        w: create(&path)?,
        path: path.clone(),
    };
    let out = training::train(&data, &model, params, &tcfg, &mut obs)?;
    obs.w.flush().map_err(|e| Error::io(&path, e))?;
    let ckpt = cfg.out.join("final.ckpt");
    let bundle = CheckpointBundle {
        groups: out.params.clone().into_groups(),
        optimizer: out.optimizer.clone(),
        config: cfg.snapshot(),
        step: out.steps as u64,
    };
    save_checkpoint(&bundle, &ckpt)?;
    let dl = dataset_loss(&data, &model, &out.params, cfg.use_latent_bank, &tcfg.loss)?;
    let mut rec = BTreeMap::new();
    rec.insert("variant".to_string(), cfg.variant().to_string());
    rec.insert("steps".into(), out.steps.to_string());
    rec.insert("final_loss_ma10".into(), fmt(moving_average(&out.log, out.log.len(), 10)));
    rec.insert("loss_total".into(), fmt(dl.total));
    rec.insert("loss_photometric".into(), fmt(dl.reproj_minus + dl.reproj_plus));
    rec.insert("loss_kl".into(), fmt(dl.kl));
    rec.insert("checkpoint_sha256".into(), file_sha256(&ckpt)?);
    write_record(&cfg.out.join("train_summary.txt"), &rec)?;
    for (k, v) in &rec {
        println!("{k} = {v}");
    }
    Ok(())
}

/// Model and parameters restored from a training checkpoint.
pub fn load_trained(path: &Path) -> Result<(RunConfig, Model, ModelParams)> {
    let b = load_checkpoint(path)?;
    let tcfg = RunConfig::from_snapshot(&b.config)?;
    let model = Model::new(&tcfg.model_config()?)?;
    b.check_layout(&model.layout())?;
    let params = ModelParams::from_groups(b.groups)?;
    Ok((tcfg, model, params))
}

fn predicted_relative(model: &Model, params: &ModelParams, seq: &Sequence) -> Result<Vec<Pose6>> {
    let mut rel = Vec::with_capacity(seq.len().saturating_sub(1));
    for w in seq.frames.windows(2) {
        let q = model.infer_pose(params, &[&w[0]], &[&w[1]])?;
        rel.push(Pose6::from_array(q[0].mean));
    }
    Ok(rel)
}

fn predicted_depth(model: &Model, params: &ModelParams, seq: &Sequence, use_bank: bool) -> Result<Vec<DepthMap>> {
    let mut out = Vec::with_capacity(seq.len());
    for f in &seq.frames {
        out.extend(model.infer_depth(params, &[f], use_bank)?);
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let seq = load_manifest_sequence(cfg)?;
    let mut rec = BTreeMap::new();
    let (depth, rel): (Option<Vec<DepthMap>>, Option<Vec<Pose6>>) = match (&cfg.checkpoint, &cfg.pred_depth_dir) {
        (Some(ck), _) => {
            let (tcfg, model, params) = load_trained(ck)?;
            check_resolution(&model.cfg, &seq)?;
            rec.insert("variant".to_string(), tcfg.variant().to_string());
            let data: Vec<FrameTriplet> = seq.triplets().collect();
            let dl = dataset_loss(&data, &model, &params, tcfg.use_latent_bank, &tcfg.train_config()?.loss)?;
            rec.insert("loss_total".into(), fmt(dl.total));
            rec.insert("loss_photometric".into(), fmt(dl.reproj_minus + dl.reproj_plus));
            rec.insert("loss_kl".into(), fmt(dl.kl));
            (
                Some(predicted_depth(&model, &params, &seq, tcfg.use_latent_bank)?),
                Some(predicted_relative(&model, &params, &seq)?),
            )
        }
        (None, Some(dir)) => {
            let d = seq
                .names
                .iter()
                .map(|n| read_depth(&dir.join(n), seq.max_depth))
                .collect::<Result<Vec<_>>>()?;
            let rel = match &cfg.pred_poses {
                Some(p) => Some(
                    read_poses(p)?
                        .windows(2)
                        .map(|w| relative_pose(&w[0], &w[1]))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            (Some(d), rel)
        }
        (None, None) => {
            return Err(Error::Config("eval needs `checkpoint` or `pred_depth_dir`".into()));
        }
    };
    prepare_out(cfg)?;
    let range = cfg.depth_scale();
    let dm = match (&depth, &seq.depths) {
        (Some(pred), Some(gt)) => {
            if pred.len() != gt.len() {
                return Err(Error::domain(format!("{} predicted maps for {} frames", pred.len(), gt.len())));
            }
            let per: Vec<DepthMetrics> = pred
                .iter()
                .zip(gt)
                .map(|(p, g)| depth_metrics(p, g, cfg.scaling, &range))
                .collect::<Result<_>>()?;
            Some(DepthMetrics::mean(&per)?)
        }
        _ => None,
    };
    let pm = match (&rel, seq.gt_relative_poses()) {
        (Some(p), Some(g)) => Some(pose_metrics(p, &g?)?),
        _ => None,
    };
    if dm.is_none() && pm.is_none() {
        return Err(Error::Config("the manifest has neither depth nor poses to evaluate against".into()));
    }
    rec.extend(metrics_record(dm.as_ref(), pm.as_ref()));
    rec.insert("frames".into(), seq.len().to_string());
    write_record(&cfg.out.join("metrics.txt"), &rec)?;
    println!("# rte: mean |s*t_pred - t_gt| over adjacent pairs, one least-squares scale s");
    println!("# rot_deg: mean geodesic angle between predicted and true relative rotations");
    for (k, v) in &rec {
        println!("{k} = {v}");
    }
    Ok(())
}

pub fn infer(cfg: &RunConfig) -> Result<()> {
    let ck = require(&cfg.checkpoint, "checkpoint")?;
    let seq = load_manifest_sequence(cfg)?;
    let (tcfg, model, params) = load_trained(ck)?;
    check_resolution(&model.cfg, &seq)?;
    prepare_out(cfg)?;
    let dir = cfg.out.join("depth");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let depth = predicted_depth(&model, &params, &seq, tcfg.use_latent_bank)?;
    for (name, d) in seq.names.iter().zip(&depth) {
        write_depth(&dir.join(name), d, seq.max_depth)?;
    }
    let rel = predicted_relative(&model, &params, &seq)?;
    let traj = accumulate_trajectory(&rel)?;
    let poses: Vec<Pose6> = traj.iter().map(Se3::to_pose6).collect();
    write_poses(&cfg.out.join("poses.txt"), &poses)?;
    println!("wrote {} depth maps and {} poses to {}", depth.len(), poses.len(), cfg.out.display());
    Ok(())
}

pub fn plot(cfg: &RunConfig) -> Result<()> {
    if cfg.trajectories.is_empty() {
        return Err(Error::Config("plot needs at least one pose file (--poses or `trajectories`)".into()));
    }
    let mut tracks = Vec::with_capacity(cfg.trajectories.len());
    let mut tables = Vec::with_capacity(cfg.trajectories.len());
    for p in &cfg.trajectories {
        let se3: Vec<Se3> = read_poses(p)?.iter().map(Pose6::to_se3).collect::<Result<_>>()?;
        tracks.push(se3.iter().map(|t| {
            let v = t.translation();
            [v.x, v.y, v.z]
        }).collect::<Vec<_>>());
        tables.push(trajectory_table(&se3));
    }
    prepare_out(cfg)?;
    for (i, t) in tables.iter().enumerate() {
        let p = cfg.out.join(format!("trajectory{i}.txt"));
        std::fs::write(&p, t).map_err(|e| Error::io(&p, e))?;
    }
    let png = cfg.out.join("trajectory.png");
    write_trajectory_plot(&png, &tracks)?;
    println!("wrote {} trajectory tables and {}", tables.len(), png.display());
    Ok(())
}
