//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed.
//!
//! The toy-scale criteria drive the `endodepth` binary with
//! `configs/toy.cfg`; expect roughly ten minutes on one core.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use endodepth::data_io::{file_sha256, generate_synthetic_scene, load_sequence, relative_pose, SequenceManifest, SyntheticSceneSpec};
use endodepth::depth_net::{sigmoid_to_depth_tensor, DepthPrediction, DepthScaleConfig};
use endodepth::eval_metrics::{depth_metrics, pose_metrics, ScalingMode};
use endodepth::geometry::{backproject, inverse_warp, project, CameraIntrinsics, Pose6};
use endodepth::kv;
use endodepth::latent_bank::{adin_fuse, gradient_penalty, wgan_losses, Critic, LinearCritic, ResCritic};
use endodepth::nn::{rng_from_seed, Binder};
use endodepth::pose_net::{PoseDistTensor, PoseDistribution, PosePrior};
use endodepth::raster::{DepthMap, Image};
use endodepth::tensor::Tensor;
use endodepth::training::{
    total_loss_terms, Bound, LossConfig, Model, ModelConfig, TripletTensors,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-9
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_cfg() -> String {
    workspace().join("configs/toy.cfg").display().to_string()
}

fn cli(args: &[String]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_endodepth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`endodepth {}` exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

macro_rules! args {
    ($($a:expr),* $(,)?) => { vec![$($a.to_string()),*] };
}

fn record(path: &Path) -> Result<BTreeMap<String, String>, String> {
    kv::read(path).map_err(|e| e.to_string())
}

fn num(rec: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    rec.get(key)
        .ok_or_else(|| format!("record lacks `{key}`"))?
        .parse()
        .map_err(|e| format!("`{key}`: {e}"))
}

// ---------------------------------------------------------------------------
// 1. Geometry

fn random_depth(rng: &mut impl Rng, h: usize, w: usize) -> DepthMap {
    DepthMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.5..10.0)).collect()).unwrap()
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::new(3, h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn geometry() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_from_seed(11);
    let mut worst_rt = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(4..24), rng.random_range(4..24));
        let k = CameraIntrinsics::new(
            rng.random_range(5.0..40.0),
            rng.random_range(5.0..40.0),
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
            w,
            h,
        )
        .unwrap();
        let d = random_depth(&mut rng, h, w);
        let (pc, m0) = backproject(&d, &k).unwrap();
        let (px, m1) = project(&pc, &k);
        ensure(m0.count() == h * w && m1.count() == h * w, "round trip lost pixels")?;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                worst_rt = worst_rt.max((px.u[i] - x as f64).abs()).max((px.v[i] - y as f64).abs());
                worst_rt = worst_rt.max((pc.points[i][2] - d.at(y, x)).abs());
            }
        }
    }
    ensure(worst_rt <= 1e-6, format!("round trip error {worst_rt:e}"))?;

    let mut worst_id = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (12, 16);
        let k = CameraIntrinsics::centered(rng.random_range(8.0..30.0), w, h).unwrap();
        let src = random_image(&mut rng, h, w);
        let d = random_depth(&mut rng, h, w);
        let (out, mask) = inverse_warp(&src, &d, &Pose6::identity(), &k).unwrap();
        ensure(mask.count() == h * w, "identity warp masked pixels")?;
        for (a, b) in out.data.iter().zip(&src.data) {
            worst_id = worst_id.max((a - b).abs());
        }
    }
    ensure(worst_id <= 1e-6, format!("identity warp error {worst_id:e}"))?;

    // Fronto-parallel plane at depth z: translating by s·z/f shifts the
    // sampling grid by exactly s pixels.
    let mut worst_shift = 0.0f64;
    let (h, w) = (10, 14);
    let f = 12.0;
    let k = CameraIntrinsics::centered(f, w, h).unwrap();
    for (sx, sy) in [(1i64, 0i64), (3, 0), (0, 2), (-2, 1), (2, -3)] {
        let z = rng.random_range(1.0..5.0);
        let d = DepthMap::filled(h, w, z);
        let src = random_image(&mut rng, h, w);
        let pose = Pose6::new([0.0; 3], [sx as f64 * z / f, sy as f64 * z / f, 0.0]).unwrap();
        let (out, mask) = inverse_warp(&src, &d, &pose, &k).unwrap();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (xs, ys) = (x + sx, y + sy);
                let inside = xs >= 0 && ys >= 0 && xs < w as i64 && ys < h as i64;
                ensure(
                    mask.at(y as usize, x as usize) == inside,
                    format!("shift ({sx},{sy}) mask wrong at ({x},{y})"),
                )?;
                if inside {
                    for c in 0..3 {
                        let e = out.at(c, y as usize, x as usize) - src.at(c, ys as usize, xs as usize);
                        worst_shift = worst_shift.max(e.abs());
                    }
                }
            }
        }
    }
    ensure(worst_shift <= 1e-12, format!("integer shift error {worst_shift:e}"))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "round trip {worst_rt:.1e}, identity {worst_id:.1e}, shift {worst_shift:.1e}, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------------------
// 2. Gradients

fn smooth_frames(h: usize, w: usize) -> TripletTensors {
    let img = |phase: f64| {
        let mut im = Image::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.3 * (0.9 * x as f64 + 0.4 * c as f64 + phase).sin()
                        + 0.15 * (0.7 * y as f64 - 0.5 * phase).cos();
                    im.set(c, y, x, v);
                }
            }
        }
        im
    };
    let (a, b, c) = (img(0.3), img(0.0), img(-0.25));
    TripletTensors::from_triplets(&[&endodepth::training::FrameTriplet {
        index: 1,
        prev: a,
        cur: b,
        next: c,
        intrinsics: CameraIntrinsics::centered(6.0, w, h).unwrap(),
        gt_depth: None,
        gt_rel: None,
    }])
    .unwrap()
}

struct FdCheck {
    worst: f64,
    count: usize,
}

impl FdCheck {
    fn new() -> Self {
        FdCheck { worst: 0.0, count: 0 }
    }

    fn check(&mut self, what: &str, analytic: f64, numeric: f64) -> Result<(), String> {
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { (analytic - numeric).abs() / scale } else { 0.0 };
        self.count += 1;
        if (analytic - numeric).abs() > 1e-9 {
            self.worst = self.worst.max(rel);
        }
        ensure(
            rel_close(analytic, numeric, 1e-3),
            format!("{what}: analytic {analytic:e} vs numeric {numeric:e}"),
        )
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let (h, w) = (8, 8);
    let frames = smooth_frames(h, w);
    let k = CameraIntrinsics::centered(6.0, w, h).unwrap();
    let prior = PosePrior::default();
    let eps = 1e-6;
    let mut fd = FdCheck::new();

    // Depth pixels, pose means and log-variances through the whole loss.
    let cfg = LossConfig { beta: 0.5, ..Default::default() };
    let depth0: Vec<f64> = (0..h * w).map(|i| 2.0 + 0.3 * ((i * 7) % 11) as f64 / 11.0).collect();
    let mean0 = [0.01, -0.02, 0.015, 0.05, -0.03, 0.1];
    let lv0 = [-6.0, -5.0, -6.5, -7.0, -6.0, -5.5];
    let plus = [-0.01, 0.02, -0.01, -0.04, 0.02, -0.1];
    let eval = |depth: &[f64], mean: &[f64; 6], lv: &[f64; 6]| {
        let d = Tensor::var(depth.to_vec(), &[1, 1, h, w]);
        let m = Tensor::var(mean.to_vec(), &[1, 6]);
        let l = Tensor::var(lv.to_vec(), &[1, 6]);
        let pred = DepthPrediction {
            sigmoid: vec![],
            depth: vec![d.clone(), d.resize_bilinear(h / 2, w / 2), d.resize_bilinear(h / 4, w / 4)],
        };
        let qm = PoseDistTensor { mean: m.clone(), log_variance: l.clone(), scale: prior.scales() };
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
    let (_, gd, gm, gl) = eval(&depth0, &mean0, &lv0);
    for i in 0..h * w {
        let (mut a, mut b) = (depth0.clone(), depth0.clone());
        a[i] += eps;
        b[i] -= eps;
        let n = (eval(&a, &mean0, &lv0).0 - eval(&b, &mean0, &lv0).0) / (2.0 * eps);
        fd.check(&format!("depth[{i}]"), gd[i], n)?;
    }
    for j in 0..6 {
        let (mut a, mut b) = (mean0, mean0);
        a[j] += eps;
        b[j] -= eps;
        let n = (eval(&depth0, &a, &lv0).0 - eval(&depth0, &b, &lv0).0) / (2.0 * eps);
        fd.check(&format!("pose mean[{j}]"), gm[j], n)?;
        let (mut a, mut b) = (lv0, lv0);
        a[j] += eps;
        b[j] -= eps;
        let n = (eval(&depth0, &mean0, &a).0 - eval(&depth0, &mean0, &b).0) / (2.0 * eps);
        fd.check(&format!("pose logvar[{j}]"), gl[j], n)?;
    }

    // KL inputs against the scalar closed form.
    let mut rng = rng_from_seed(21);
    for _ in 0..5 {
        let mu: [f64; 6] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        let lv: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..1.0));
        let m = Tensor::var(mu.to_vec(), &[1, 6]);
        let l = Tensor::var(lv.to_vec(), &[1, 6]);
        let kl = PoseDistTensor { mean: m.clone(), log_variance: l.clone(), scale: prior.scales() }.kl();
        let g = kl.backward();
        let f = |mu: [f64; 6], lv: [f64; 6]| PoseDistribution::new(mu, lv, &prior).unwrap().kl_to_prior();
        for j in 0..6 {
            let (mut a, mut b) = (mu, mu);
            a[j] += eps;
            b[j] -= eps;
            fd.check("kl mean", g.get(&m).unwrap()[j], (f(a, lv) - f(b, lv)) / (2.0 * eps))?;
            let (mut a, mut b) = (lv, lv);
            a[j] += eps;
            b[j] -= eps;
            fd.check("kl logvar", g.get(&l).unwrap()[j], (f(mu, a) - f(mu, b)) / (2.0 * eps))?;
        }
    }

    // AdIN scale and shift driving the depth that enters the loss.
    let c = 4;
    let feats = Tensor::from_vec(
        (0..c * h * w).map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.4 + 0.1 * (i as f64).sin()).collect(),
        &[1, c, h, w],
    );
    let range = DepthScaleConfig { min_depth: 0.5, max_depth: 10.0 };
    let fixed = LossConfig { beta: 0.0, use_vae: false, sample_poses: false, ..Default::default() };
    let gamma0 = [1.1, 0.8, 1.3, 0.95];
    let beta0 = [0.1, -0.2, 0.05, 0.3];
    let adin_eval = |gamma: &[f64], beta: &[f64]| {
        let g = Tensor::var(gamma.to_vec(), &[1, c]);
        let b = Tensor::var(beta.to_vec(), &[1, c]);
        let y = adin_fuse(&feats, &g, &b).unwrap();
        let d = sigmoid_to_depth_tensor(&y.mean_keepdim(&[1]).sigmoid(), &range);
        let pred = DepthPrediction { sigmoid: vec![], depth: vec![d.clone(), d.resize_bilinear(h / 2, w / 2)] };
        let q = |v: [f64; 6]| PoseDistTensor {
            mean: Tensor::from_vec(v.to_vec(), &[1, 6]),
            log_variance: Tensor::full(&[1, 6], -6.0),
            scale: prior.scales(),
        };
        let t = total_loss_terms(&frames, &k, &pred, &q(mean0), &q(plus), &fixed, &mut rng_from_seed(0)).unwrap();
        let gr = t.total.backward();
        (t.total.item(), gr.get(&g).unwrap().to_vec(), gr.get(&b).unwrap().to_vec())
    };
    let (_, gg, gb) = adin_eval(&gamma0, &beta0);
    for j in 0..c {
        let (mut a, mut b) = (gamma0, gamma0);
        a[j] += eps;
        b[j] -= eps;
        fd.check("adin gamma", gg[j], (adin_eval(&a, &beta0).0 - adin_eval(&b, &beta0).0) / (2.0 * eps))?;
        let (mut a, mut b) = (beta0, beta0);
        a[j] += eps;
        b[j] -= eps;
        fd.check("adin beta", gb[j], (adin_eval(&gamma0, &a).0 - adin_eval(&gamma0, &b).0) / (2.0 * eps))?;
    }

    // Trainable AdIN parameters of the real model (smallest size it takes).
    let model = Model::new(&ModelConfig::toy()).unwrap();
    let mut params = model.init(0);
    params.latent_bank.freeze();
    let spec = SyntheticSceneSpec { frames: 3, ..Default::default() };
    let scene = endodepth::data_io::render_scene(&spec, false).unwrap();
    let tri = endodepth::training::FrameTriplet {
        index: 1,
        prev: scene.images[0].clone(),
        cur: scene.images[1].clone(),
        next: scene.images[2].clone(),
        intrinsics: scene.intrinsics,
        gt_depth: None,
        gt_rel: None,
    };
    let tt = TripletTensors::from_triplets(&[&tri]).unwrap();
    let loss_of = |p: &endodepth::training::ModelParams| {
        let binder = Binder::inference();
        let s = Bound::new(&binder, p);
        model.loss(&s, &tt, &tri.intrinsics, true, &fixed, &mut rng_from_seed(0)).unwrap().total.item()
    };
    let grads = {
        let binder = Binder::training();
        let s = Bound::new(&binder, &params);
        let t = model.loss(&s, &tt, &tri.intrinsics, true, &fixed, &mut rng_from_seed(0)).unwrap();
        let mut g = t.total.backward();
        binder.collect(&mut g)
    };
    let adin = &grads["adin_trainable"];
    let names: Vec<(String, usize)> = params.adin_trainable.iter().map(|(n, p)| (n.clone(), p.data.len())).collect();
    for (name, len) in names {
        for idx in [0, len / 2] {
            let mut a = params.clone();
            let mut b = params.clone();
            a.adin_trainable.perturb(&name, idx, eps).unwrap();
            b.adin_trainable.perturb(&name, idx, -eps).unwrap();
            let n = (loss_of(&a) - loss_of(&b)) / (2.0 * eps);
            fd.check(&format!("adin_trainable/{name}[{idx}]"), adin[&name][idx], n)?;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} gradients, worst relative error {:.1e}, {secs:.1} s", fd.count, fd.worst))
}

// ---------------------------------------------------------------------------
// 3. KL

fn kl_oracle() -> Outcome {
    let mut rng = rng_from_seed(33);
    let prior = PosePrior::default();
    let s = prior.scales();
    let mut worst = 0.0f64;
    let samples = 1_000_000;
    for _ in 0..20 {
        let mean: [f64; 6] = std::array::from_fn(|j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s[j] * 0.8 * z
        });
        let lv: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..1.0));
        let q = PoseDistribution::new(mean, lv, &prior).unwrap();
        let closed = q.kl_to_prior();
        let var_q: Vec<f64> = (0..6).map(|j| lv[j].exp() * s[j] * s[j]).collect();
        let mut acc = 0.0;
        let mut draw = rng_from_seed(rng.random());
        for _ in 0..samples {
            let z = q.sample_with(&mut draw);
            for j in 0..6 {
                let lq = -0.5 * (2.0 * PI * var_q[j]).ln() - (z[j] - mean[j]).powi(2) / (2.0 * var_q[j]);
                let lp = -0.5 * (2.0 * PI * s[j] * s[j]).ln() - z[j] * z[j] / (2.0 * s[j] * s[j]);
                acc += lq - lp;
            }
        }
        let mc = acc / samples as f64;
        let rel = (mc - closed).abs() / closed;
        worst = worst.max(rel);
        ensure(rel < 0.01, format!("closed {closed} vs Monte Carlo {mc}"))?;
    }
    let p = PoseDistribution::new([0.0; 6], [0.0; 6], &prior).unwrap();
    let t = PoseDistTensor {
        mean: Tensor::zeros(&[1, 6]),
        log_variance: Tensor::zeros(&[1, 6]),
        scale: s,
    };
    ensure(p.kl_to_prior() == 0.0 && t.kl().item() == 0.0, "KL(prior||prior) is not 0")?;
    Ok(format!("worst relative gap to Monte Carlo {:.2}% over 20 posteriors", worst * 100.0))
}

// ---------------------------------------------------------------------------
// 4. WGAN-GP

fn wgan_oracle() -> Outcome {
    let mut rng = rng_from_seed(44);
    let mut batch = |b: usize, n: usize, side: usize| {
        Tensor::from_vec((0..b * n * side * side).map(|_| rng.random::<f64>()).collect(), &[b, n, side, side])
    };
    let mut worst_unit = 0.0f64;
    for t in 0..10 {
        let raw: Vec<f64> = (0..4).map(|i| ((i + t) as f64 * 1.7).sin() + 0.1).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = LinearCritic { weight: raw.iter().map(|v| v / norm).collect(), bias: 0.2 };
        let gp = gradient_penalty(&d, &batch(3, 1, 2), &batch(3, 1, 2), &mut rng_from_seed(t)).unwrap();
        worst_unit = worst_unit.max(gp.item().abs());
    }
    ensure(worst_unit <= 1e-8, format!("unit critic penalty {worst_unit:e}"))?;
    let d = LinearCritic { weight: vec![2.0; 4], bias: -1.0 };
    let gp9 = gradient_penalty(&d, &batch(5, 1, 2), &batch(5, 1, 2), &mut rng_from_seed(1)).unwrap().item();
    ensure((gp9 - 9.0).abs() <= 1e-6, format!("slope-2 critic penalty {gp9}"))?;

    // Objective assembly with a real critic against terms computed one
    // sample at a time, input gradients by reverse-mode on the score.
    let critic = ResCritic::new(&[8, 6]);
    let store = critic.init(&mut rng_from_seed(3));
    let binder = Binder::inference();
    let bound = critic.bind(binder.scope("critic", &store), 1).unwrap();
    let (b, side, gamma) = (4, 8, 10.0);
    let real = batch(b, 1, side);
    let fake = batch(b, 1, side);
    let terms = wgan_losses(&bound, &real, &fake, gamma, &mut rng_from_seed(77)).unwrap();
    let n = side * side;
    let one = |t: &Tensor, i: usize| Tensor::from_vec(t.data()[i * n..(i + 1) * n].to_vec(), &[1, 1, side, side]);
    let er = (0..b).map(|i| bound.score(&one(&real, i)).item()).sum::<f64>() / b as f64;
    let ef = (0..b).map(|i| bound.score(&one(&fake, i)).item()).sum::<f64>() / b as f64;
    let mut urng = rng_from_seed(77);
    let mut gp = 0.0;
    for i in 0..b {
        let u: f64 = urng.random();
        let (r, f) = (one(&real, i), one(&fake, i));
        let xhat: Vec<f64> = r.data().iter().zip(f.data()).map(|(a, c)| u * a + (1.0 - u) * c).collect();
        let x = Tensor::var(xhat, &[1, 1, side, side]);
        let g = bound.score(&x).sum_all().backward();
        let norm = g.get(&x).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        gp += (norm - 1.0).powi(2) / b as f64;
    }
    let want = ef - er + gamma * gp;
    let err = (terms.loss_d.item() - want)
        .abs()
        .max((terms.gp.item() - gp).abs())
        .max((terms.loss_g.item() + ef).abs())
        .max((terms.wasserstein_gap() - (er - ef)).abs());
    ensure(err <= 1e-6, format!("assembly differs by {err:e}"))?;
    Ok(format!("unit GP {worst_unit:.1e}, slope-2 GP {gp9:.9}, assembly error {err:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Metrics

struct DepthOracle([f64; 8]);

fn depth_oracle(pred: &[f64], gt: &[f64], median: bool, lo: f64, hi: f64) -> DepthOracle {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.len() {
        if gt[i] > 0.0 {
            p.push(pred[i]);
            g.push(gt[i]);
        }
    }
    let med = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 }
    };
    if median {
        let r = med(&g) / med(&p);
        p.iter_mut().for_each(|v| *v *= r);
    }
    let n = p.len() as f64;
    let mut m = [0.0; 8];
    for i in 0..p.len() {
        let pi = p[i].max(lo).min(hi);
        let gi = g[i].max(lo).min(hi);
        let e = pi - gi;
        m[0] += e.abs() / gi / n;
        m[1] += e * e / gi / n;
        m[2] += e * e / n;
        m[3] += (pi.ln() - gi.ln()) * (pi.ln() - gi.ln()) / n;
        m[4] += e.abs() / n;
        let r = if pi > gi { pi / gi } else { gi / pi };
        for (k, th) in [1.25, 1.5625, 1.953125].iter().enumerate() {
            if r < *th {
                m[5 + k] += 1.0 / n;
            }
        }
    }
    m[2] = m[2].sqrt();
    m[3] = m[3].sqrt();
    DepthOracle(m)
}

type Quat = [f64; 4];

fn quat(r: [f64; 3]) -> Quat {
    let th = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if th == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let s = (th / 2.0).sin() / th;
    [(th / 2.0).cos(), r[0] * s, r[1] * s, r[2] * s]
}

fn qmul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn pose_oracle(pred: &[Pose6], gt: &[Pose6]) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for j in 0..3 {
            num += p.translation[j] * g.translation[j];
            den += p.translation[j] * p.translation[j];
        }
    }
    let s = num / den;
    let mut rte = 0.0;
    let mut rot = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let mut e = 0.0;
        for j in 0..3 {
            e += (s * p.translation[j] - g.translation[j]).powi(2);
        }
        rte += e.sqrt();
        let qp = quat(p.rotation);
        let qc = [qp[0], -qp[1], -qp[2], -qp[3]];
        let q = qmul(qc, quat(g.rotation));
        let v = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        rot += 2.0 * v.atan2(q[0].abs()) * 180.0 / PI;
    }
    (rte / pred.len() as f64, rot / pred.len() as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = rng_from_seed(55);
    let range = DepthScaleConfig { min_depth: 0.1, max_depth: 20.0 };
    let mut worst = 0.0f64;
    let instance = |rng: &mut rand_chacha::ChaCha8Rng| {
        let gt: Vec<f64> = (0..64)
            .map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.05..25.0) })
            .collect();
        let pred: Vec<f64> = gt
            .iter()
            .map(|&g| (g.max(0.5) * rng.random_range(0.5..1.8)).max(0.01))
            .collect();
        (pred, gt)
    };
    for _ in 0..50 {
        let (pred, gt) = instance(&mut rng);
        let p = DepthMap::new(8, 8, pred.clone()).unwrap();
        let g = DepthMap::new(8, 8, gt.clone()).unwrap();
        for (mode, median) in [(ScalingMode::None, false), (ScalingMode::Median, true)] {
            let got = depth_metrics(&p, &g, mode, &range).unwrap().values();
            let want = depth_oracle(&pred, &gt, median, 0.1, 20.0).0;
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
        let n = rng.random_range(2..8);
        let rp = |rng: &mut rand_chacha::ChaCha8Rng| {
            Pose6::new(
                std::array::from_fn(|_| rng.random_range(-0.4..0.4)),
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            )
            .unwrap()
        };
        let pred: Vec<Pose6> = (0..n).map(|_| rp(&mut rng)).collect();
        let gt: Vec<Pose6> = (0..n).map(|_| rp(&mut rng)).collect();
        let got = pose_metrics(&pred, &gt).unwrap();
        let (rte, rot) = pose_oracle(&pred, &gt);
        worst = worst.max((got.rte - rte).abs()).max((got.rot - rot).abs());
    }
    ensure(worst <= 1e-9, format!("worst oracle gap {worst:e}"))?;

    let mut worst_inv = 0.0f64;
    for _ in 0..1000 {
        let (pred, gt) = instance(&mut rng);
        let g = DepthMap::new(8, 8, gt.clone()).unwrap();
        let m = depth_metrics(&DepthMap::new(8, 8, pred.clone()).unwrap(), &g, ScalingMode::Median, &range).unwrap();
        ensure(
            m.delta_1 <= m.delta_2 && m.delta_2 <= m.delta_3,
            format!("delta not monotone: {} {} {}", m.delta_1, m.delta_2, m.delta_3),
        )?;
        let u = depth_metrics(&DepthMap::new(8, 8, pred.clone()).unwrap(), &g, ScalingMode::None, &range).unwrap();
        ensure(u.delta_1 <= u.delta_2 && u.delta_2 <= u.delta_3, "delta not monotone without scaling")?;
        let k = rng.random_range(0.05..20.0);
        let scaled: Vec<f64> = pred.iter().map(|v| v * k).collect();
        let ms = depth_metrics(&DepthMap::new(8, 8, scaled).unwrap(), &g, ScalingMode::Median, &range).unwrap();
        for (a, b) in m.values().iter().zip(ms.values()) {
            worst_inv = worst_inv.max((a - b).abs());
        }
    }
    ensure(worst_inv <= 1e-9, format!("median scaling not invariant: {worst_inv:e}"))?;
    Ok(format!("oracle gap {worst:.1e} on 50 instances, invariance gap {worst_inv:.1e} on 1000"))
}

// ---------------------------------------------------------------------------
// 6. Synthetic scenes

fn synthetic_consistency(work: &Path) -> Outcome {
    let specs = [
        SyntheticSceneSpec::default(),
        SyntheticSceneSpec { texture_seed: 3, follow_path: false, frames: 8, ..Default::default() },
        SyntheticSceneSpec { radius_amplitude: 0.1, sway: [0.4, 0.3], step: 0.3, frames: 8, texture_seed: 11, ..Default::default() },
        SyntheticSceneSpec { width: 96, height: 80, focal: 60.0, frames: 6, ..Default::default() },
    ];
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for (i, spec) in specs.iter().enumerate() {
        let dir = work.join(format!("scene{i}"));
        let (_, manifest) = generate_synthetic_scene(spec, &dir).map_err(|e| e.to_string())?;
        let seq = load_sequence(&SequenceManifest::read(&manifest).unwrap()).unwrap();
        let depths = seq.depths.as_ref().unwrap();
        let poses = seq.poses.as_ref().unwrap();
        for t in 0..seq.len() - 1 {
            for (src, tgt) in [(t + 1, t), (t, t + 1)] {
                let rel = relative_pose(&poses[src], &poses[tgt]).unwrap();
                let (warped, mask) = inverse_warp(&seq.frames[src], &depths[tgt], &rel, &seq.intrinsics).unwrap();
                ensure(mask.count() > 0, "empty warp")?;
                let mut se = 0.0;
                for y in 0..warped.height {
                    for x in 0..warped.width {
                        if mask.at(y, x) {
                            for c in 0..3 {
                                se += (warped.at(c, y, x) - seq.frames[tgt].at(c, y, x)).powi(2);
                            }
                        }
                    }
                }
                let mse = se / (3.0 * mask.count() as f64);
                worst = worst.max(mse);
                pairs += 1;
                ensure(mse < 1e-3, format!("scene {i}, frames {src}->{tgt}: warp MSE {mse:e}"))?;
            }
        }
    }
    Ok(format!("worst warp MSE {worst:.2e} over {pairs} directed pairs in {} scenes", specs.len()))
}

// ---------------------------------------------------------------------------
// Toy-scale runs shared by 7, 8 and 9.

struct ToyRuns {
    work: PathBuf,
    manifest: String,
    bank: Option<String>,
}

impl ToyRuns {
    fn train_and_eval(&self, name: &str, seed: u64, flags: &[&str]) -> Result<(PathBuf, f64), String> {
        let dir = self.work.join(name);
        let bank = self.bank.clone().ok_or("no pretrained bank")?;
        let mut a = args![
            "train", "--config", toy_cfg(), "--seed", seed, "--out", dir.display(),
            "--set", format!("manifest={}", self.manifest), "--set", format!("bank={bank}")
        ];
        a.extend(flags.iter().map(|s| s.to_string()));
        let t0 = Instant::now();
        cli(&a)?;
        let secs = t0.elapsed().as_secs_f64();
        cli(&args![
            "eval", "--config", toy_cfg(), "--out", dir.join("eval").display(),
            "--set", format!("manifest={}", self.manifest),
            "--set", format!("checkpoint={}", dir.join("final.ckpt").display())
        ])?;
        Ok((dir, secs))
    }
}

fn pretraining(runs: &mut ToyRuns) -> Outcome {
    let scene = runs.work.join("corpus_scene");
    cli(&args!["synth", "--config", toy_cfg(), "--out", scene.display(), "--set", "frames=16", "--set", "step=0.25"])?;
    let out = runs.work.join("bank");
    let t0 = Instant::now();
    cli(&args![
        "pretrain-bank", "--config", toy_cfg(), "--out", out.display(),
        "--set", format!("corpus={}", scene.join("depth").display())
    ])?;
    let secs = t0.elapsed().as_secs_f64();
    runs.bank = Some(out.join("bank.ckpt").display().to_string());
    let rec = record(&out.join("pretrain_summary.txt"))?;
    let steps = num(&rec, "steps")?;
    let red = num(&rec, "gap_reduction")?;
    let distinct = num(&rec, "distinct_fraction")?;
    let spread = num(&rec, "sample_spread")? / num(&rec, "corpus_spread")?;
    let corpus = std::fs::read_dir(scene.join("depth")).map_err(|e| e.to_string())?.count();
    ensure(corpus == 16, format!("corpus has {corpus} maps"))?;
    ensure(steps <= 2000.0, format!("{steps} steps"))?;
    ensure(red >= 0.5, format!("smoothed gap fell only {:.0}% from its peak", red * 100.0))?;
    ensure(distinct == 1.0 && spread >= 0.1, format!("collapse: distinct {distinct}, spread ratio {spread:.3}"))?;
    Ok(format!(
        "{steps} steps on 16 maps at 64x64: smoothed gap {:.3} -> {:.3} ({:.0}% drop); distinct pairs {:.0}%, spread ratio {spread:.2}; {secs:.0} s",
        num(&rec, "max_smoothed_gap")?,
        num(&rec, "final_smoothed_gap")?,
        red * 100.0,
        distinct * 100.0
    ))
}

fn toy_learning(runs: &ToyRuns) -> Outcome {
    let (dir, secs) = runs.train_and_eval("full_s0", 0, &[])?;
    let log = std::fs::read_to_string(dir.join("train_log.jsonl")).map_err(|e| e.to_string())?;
    let totals: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["total"].as_f64().unwrap())
        .collect();
    ensure(totals.len() == 500, format!("{} steps logged", totals.len()))?;
    let early = totals[..10].iter().sum::<f64>() / 10.0;
    let late = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - late / early;
    let abs_rel = num(&record(&dir.join("eval/metrics.txt"))?, "abs_rel")?;
    ensure(drop >= 0.8, format!("loss fell {:.1}%", drop * 100.0))?;
    ensure(abs_rel < 0.30, format!("Abs Rel {abs_rel:.3}"))?;
    ensure(secs < 900.0, format!("training took {secs:.0} s"))?;
    Ok(format!(
        "loss {early:.3e} -> {late:.3e} ({:.1}% drop), median-scaled Abs Rel {abs_rel:.3}, {secs:.0} s",
        drop * 100.0
    ))
}

fn ablation(runs: &ToyRuns) -> Outcome {
    let variants: [(&str, &[&str], &str); 4] = [
        ("full_s0", &[], "Ours(full)"),
        ("nobank_s0", &["--no-latent-bank"], "Ours w/o Latent Bank"),
        ("novae_s0", &["--no-vae"], "Ours w/o Vae"),
        ("off_s0", &["--no-latent-bank", "--no-vae"], "Ours w/o Vae and Latent Bank"),
    ];
    let mut records = Vec::new();
    for (name, flags, label) in variants {
        let dir = runs.work.join(name);
        if !dir.join("eval/metrics.txt").exists() {
            runs.train_and_eval(name, 0, flags)?;
        }
        let rec = record(&dir.join("eval/metrics.txt"))?;
        ensure(rec.get("variant").map(String::as_str) == Some(label), format!("{name} labelled {:?}", rec.get("variant")))?;
        records.push(rec);
    }
    for i in 0..4 {
        for j in i + 1..4 {
            ensure(records[i] != records[j], "two variants produced the same record")?;
        }
    }
    // Converged photometric loss, averaged over three seeds.
    let mut full = vec![num(&records[0], "loss_photometric")?];
    let mut off = vec![num(&records[3], "loss_photometric")?];
    for seed in [1, 2] {
        let (d, _) = runs.train_and_eval(&format!("full_s{seed}"), seed, &[])?;
        full.push(num(&record(&d.join("eval/metrics.txt"))?, "loss_photometric")?);
        let (d, _) = runs.train_and_eval(&format!("off_s{seed}"), seed, &["--no-latent-bank", "--no-vae"])?;
        off.push(num(&record(&d.join("eval/metrics.txt"))?, "loss_photometric")?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mo) = (mean(&full), mean(&off));
    let detail = format!(
        "photometric full {:?} (mean {mf:.3e}) vs both-off {:?} (mean {mo:.3e}); full total {:.3e}",
        full.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
        off.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
        num(&records[0], "loss_total")?
    );
    ensure(mf <= mo, detail.clone())?;
    Ok(format!("4 labelled records; {detail}"))
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.effective" {
                let key = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, file_sha256(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(work: &Path) -> Outcome {
    let run_twice = |name: &str, a: Vec<String>| -> Result<BTreeMap<String, String>, String> {
        let mut digests = Vec::new();
        for r in ["a", "b"] {
            let out = work.join(format!("{name}_{r}"));
            let mut args = a.clone();
            args.extend(args!["--out", out.display()]);
            cli(&args)?;
            digests.push(tree_digest(&out));
        }
        ensure(!digests[0].is_empty(), format!("{name} wrote nothing"))?;
        ensure(digests[0] == digests[1], format!("{name} outputs differ between identical runs"))?;
        Ok(digests.remove(0))
    };
    let cfg = toy_cfg();
    let scene = run_twice("synth", args!["synth", "--config", cfg, "--seed", 5, "--set", "frames=4"])?;
    let sdir = work.join("synth_a");
    let manifest = format!("manifest={}", sdir.join("manifest.txt").display());
    let bank = run_twice(
        "pretrain",
        args![
            "pretrain-bank", "--config", cfg, "--seed", 5, "--set", format!("corpus={}", sdir.join("depth").display()),
            "--set", "pretrain_steps=5", "--set", "pretrain_batch_size=2", "--set", "samples=2"
        ],
    )?;
    let bank_path = format!("bank={}", work.join("pretrain_a/bank.ckpt").display());
    let tiny = |seed: u64| {
        args![
            "train", "--config", cfg, "--seed", seed, "--set", &manifest, "--set", &bank_path,
            "--set", "max_steps=4", "--set", "batch_size=1", "--set", "checkpoint_every=1"
        ]
    };
    let train = run_twice("train", tiny(5))?;
    let ckpt = format!("checkpoint={}", work.join("train_a/final.ckpt").display());
    let eval = run_twice("eval", args!["eval", "--config", cfg, "--seed", 5, "--set", &manifest, "--set", &ckpt])?;
    let infer = run_twice("infer", args!["infer", "--config", cfg, "--seed", 5, "--set", &manifest, "--set", &ckpt])?;
    let poses = sdir.join("poses.txt").display().to_string();
    let plot = run_twice("plot", args!["plot", "--config", cfg, "--poses", poses, "--poses", work.join("infer_a/poses.txt").display()])?;
    // A different seed must change the trained weights.
    let mut other = tiny(6);
    other.extend(args!["--out", work.join("train_seed6").display()]);
    cli(&other)?;
    let changed = tree_digest(&work.join("train_seed6"));
    ensure(changed["final.ckpt"] != train["final.ckpt"], "seed has no effect on training")?;
    let files = scene.len() + bank.len() + train.len() + eval.len() + infer.len() + plot.len();
    Ok(format!(
        "6 subcommands run twice, {files} files byte-identical (final.ckpt {}..., metrics.txt {}...)",
        &train["final.ckpt"][..12],
        &eval["metrics.txt"][..12]
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path().to_path_buf();
    let mut runs = ToyRuns {
        work: w.join("toy"),
        manifest: String::new(),
        bank: None,
    };
    let mut results: Vec<(usize, &str, Result<String, String>, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let r = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t0.elapsed().as_secs_f64();
        let (tag, msg) = match &r {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("criterion {n:2} {tag} {name}: {msg} [{secs:.1} s]");
        results.push((n, name, r, secs));
    };
    run(1, "geometry oracles", &mut geometry);
    run(2, "gradient checks", &mut gradients);
    run(3, "KL oracle", &mut kl_oracle);
    run(4, "WGAN-GP oracle", &mut wgan_oracle);
    run(5, "metric oracles", &mut metric_oracle);
    run(6, "synthetic self-consistency", &mut || synthetic_consistency(&w.join("scenes")));
    let scene = runs.work.join("scene");
    let setup = cli(&args!["synth", "--config", toy_cfg(), "--out", scene.display()]);
    runs.manifest = scene.join("manifest.txt").display().to_string();
    run(9, "pretraining dynamics", &mut || {
        setup.clone()?;
        pretraining(&mut runs)
    });
    run(7, "toy-scale learning", &mut || toy_learning(&runs));
    run(8, "ablation wiring", &mut || ablation(&runs));
    run(10, "determinism", &mut || determinism(&w.join("det")));

    results.sort_by_key(|r| r.0);
    println!();
    println!("acceptance summary");
    for (n, name, r, _) in &results {
        println!("  criterion {n:2} {} {name}", if r.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
