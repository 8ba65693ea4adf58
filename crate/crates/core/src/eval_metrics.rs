//! Depth and relative-pose error metrics, trajectory accumulation and
//! trajectory plots.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::depth_net::DepthScaleConfig;
use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, Pose6, Se3};
use crate::raster::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    Median,
    None,
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(ScalingMode::Median),
            "none" => Ok(ScalingMode::None),
            _ => Err(Error::Config(format!("scaling mode `{s}` (expected median|none)"))),
        }
    }
}

impl std::fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScalingMode::Median => "median",
            ScalingMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub l1: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
    pub scaling_mode: ScalingMode,
}

pub const DEPTH_METRIC_KEYS: [&str; 8] = [
    "abs_rel", "sq_rel", "rmse", "rmse_log", "l1", "delta_1", "delta_2", "delta_3",
];

impl DepthMetrics {
    pub fn values(&self) -> [f64; 8] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.l1,
            self.delta_1,
            self.delta_2,
            self.delta_3,
        ]
    }

    /// Averages per-frame metrics.
    pub fn mean(items: &[DepthMetrics]) -> Result<DepthMetrics> {
        let first = items.first().ok_or_else(|| Error::domain("no metrics to average"))?;
        let mut acc = [0.0; 8];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        let v = acc.map(|a| a / n);
        Ok(DepthMetrics {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            l1: v[4],
            delta_1: v[5],
            delta_2: v[6],
            delta_3: v[7],
            scaling_mode: first.scaling_mode,
        })
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics over pixels with finite `gt > 0`. In median mode `pred` is first
/// multiplied by `median(gt)/median(pred)`; both are then clamped to the
/// depth range.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mode: ScalingMode, range: &DepthScaleConfig) -> Result<DepthMetrics> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::domain(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    range.validate()?;
    let idx: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] > 0.0 && gt.data[i].is_finite()).collect();
    if idx.is_empty() {
        return Err(Error::domain("ground truth has no valid pixels"));
    }
    let mut p: Vec<f64> = idx.iter().map(|&i| pred.data[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| gt.data[i].clamp(range.min_depth, range.max_depth)).collect();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("prediction has non-finite values"));
    }
    if mode == ScalingMode::Median {
        let mp = median(&mut p.clone());
        if !(mp > 0.0) {
            return Err(Error::domain("prediction median is not positive"));
        }
        let ratio = median(&mut idx.iter().map(|&i| gt.data[i]).collect::<Vec<_>>()) / mp;
        for v in &mut p {
            *v *= ratio;
        }
    }
    for v in &mut p {
        *v = v.clamp(range.min_depth, range.max_depth);
    }
    let n = p.len() as f64;
    let (mut ar, mut sr, mut se, mut sl, mut l1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut d = [0usize; 3];
    for (&pi, &gi) in p.iter().zip(&g) {
        let e = pi - gi;
        ar += e.abs() / gi;
        sr += e * e / gi;
        se += e * e;
        sl += (pi.ln() - gi.ln()).powi(2);
        l1 += e.abs();
        let r = (pi / gi).max(gi / pi);
        for (k, c) in d.iter_mut().enumerate() {
            if r < 1.25f64.powi(k as i32 + 1) {
                *c += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: ar / n,
        sq_rel: sr / n,
        rmse: (se / n).sqrt(),
        rmse_log: (sl / n).sqrt(),
        l1: l1 / n,
        delta_1: d[0] as f64 / n,
        delta_2: d[1] as f64 / n,
        delta_3: d[2] as f64 / n,
        scaling_mode: mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub rte: f64,
    /// Degrees.
    pub rot: f64,
}

/// Least-squares scale `s` minimising `Σ‖s·t_pred − t_gt‖²`.
pub fn translation_scale(pred: &[Pose6], gt: &[Pose6]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for j in 0..3 {
            num += p.translation[j] * g.translation[j];
            den += p.translation[j] * p.translation[j];
        }
    }
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

pub fn pose_metrics(pred: &[Pose6], gt: &[Pose6]) -> Result<PoseMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::domain(format!("{} predicted poses for {} ground-truth poses", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::domain("no poses to evaluate"));
    }
    let s = translation_scale(pred, gt);
    let mut rte = 0.0;
    let mut rot = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let e: f64 = (0..3).map(|j| (s * p.translation[j] - g.translation[j]).powi(2)).sum();
        rte += e.sqrt();
        let rp = p.to_se3()?.rotation();
        let rg = g.to_se3()?.rotation();
        rot += rotation_angle(&(rp.transpose() * rg)).to_degrees();
    }
    let n = pred.len() as f64;
    Ok(PoseMetrics {
        rte: rte / n,
        rot: rot / n,
    })
}

/// Chains relative poses `T_{k←k+1}` into camera-to-world poses with the
/// first camera at the origin.
pub fn accumulate_trajectory(rel: &[Pose6]) -> Result<Vec<Se3>> {
    let mut out = vec![Se3::identity()];
    for r in rel {
        let last = out.last().expect("non-empty");
        out.push(last.compose(&r.to_se3()?));
    }
    Ok(out)
}

/// Flat `key = value` record of the metrics.
pub fn metrics_record(depth: Option<&DepthMetrics>, pose: Option<&PoseMetrics>) -> BTreeMap<String, String> {
    let mut r = BTreeMap::new();
    if let Some(d) = depth {
        for (k, v) in DEPTH_METRIC_KEYS.iter().zip(d.values()) {
            r.insert(k.to_string(), format!("{v:?}"));
        }
        r.insert("scaling_mode".into(), d.scaling_mode.to_string());
    }
    if let Some(p) = pose {
        r.insert("rte".into(), format!("{:?}", p.rte));
        r.insert("rot_deg".into(), format!("{:?}", p.rot));
    }
    r
}

pub fn trajectory_table(traj: &[Se3]) -> String {
    let mut s = String::from("frame x y z\n");
    for (i, t) in traj.iter().enumerate() {
        let p = t.translation();
        s.push_str(&format!("{i} {:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    s
}

/// Parses a `frame x y z` table back into positions.
pub fn parse_trajectory_table(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("frame") || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .skip(1)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("trajectory line {}: {e}", i + 1)))?;
        if v.len() != 3 {
            return Err(Error::Format(format!("trajectory line {}: expected frame x y z", i + 1)));
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}

const PLOT_COLORS: [[u8; 3]; 4] = [[220, 40, 40], [30, 90, 220], [30, 160, 60], [200, 140, 20]];

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for i in 0..=n {
        let x = a.0 + (b.0 - a.0) * i / n;
        let y = a.1 + (b.1 - a.1) * i / n;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Two side-by-side panels (x–z and x–y) of every trajectory, sharing one
/// scale per panel.
pub fn plot_trajectories(tracks: &[Vec<[f64; 3]>], panel: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(panel * 2, panel, Rgb([255, 255, 255]));
    for (pi, axes) in [(0usize, 2usize), (0, 1)].into_iter().enumerate() {
        let pts = tracks.iter().flatten();
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for (d, &a) in [axes.0, axes.1].iter().enumerate() {
                lo[d] = lo[d].min(p[a]);
                hi[d] = hi[d].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        let margin = panel as f64 * 0.08;
        let s = (panel as f64 - 2.0 * margin) / span;
        let ox = pi as f64 * panel as f64;
        let map = |p: &[f64; 3]| {
            let u = margin + (p[axes.0] - lo[0]) * s;
            let v = margin + (p[axes.1] - lo[1]) * s;
            ((ox + u).round() as i64, (panel as f64 - v).round() as i64)
        };
        let grey = Rgb([200, 200, 200]);
        draw_line(&mut img, (ox as i64, 0), (ox as i64, panel as i64 - 1), grey);
        for (ti, t) in tracks.iter().enumerate() {
            let c = Rgb(PLOT_COLORS[ti % PLOT_COLORS.len()]);
            for w in t.windows(2) {
                draw_line(&mut img, map(&w[0]), map(&w[1]), c);
            }
            if let Some(p) = t.first() {
                let (x, y) = map(p);
                for dx in -2..=2 {
                    draw_line(&mut img, (x + dx, y - 2), (x + dx, y + 2), c);
                }
            }
        }
    }
    img
}

pub fn write_trajectory_plot(path: &Path, tracks: &[Vec<[f64; 3]>]) -> Result<()> {
    plot_trajectories(tracks, 320)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_from_seed;
    use rand::Rng;

    fn range() -> DepthScaleConfig {
        DepthScaleConfig {
            min_depth: 1e-3,
            max_depth: 100.0,
        }
    }

    fn map(v: Vec<f64>) -> DepthMap {
        let n = v.len();
        DepthMap::new(1, n, v).unwrap()
    }

    #[test]
    fn identical_maps_are_perfect() {
        let g = map(vec![1.0, 2.0, 3.0, 4.0]);
        let m = depth_metrics(&g, &g, ScalingMode::None, &range()).unwrap();
        assert_eq!(&m.values()[..5], &[0.0; 5]);
        assert_eq!(&m.values()[5..], &[1.0; 3]);
    }

    #[test]
    fn median_mode_removes_global_scale() {
        let g = map(vec![1.0, 2.5, 3.0, 4.0, 7.0]);
        let p = map(g.data.iter().map(|v| 2.0 * v).collect());
        let m = depth_metrics(&p, &g, ScalingMode::Median, &range()).unwrap();
        assert_eq!(&m.values()[..5], &[0.0; 5]);
    }

    #[test]
    fn scaled_prediction_without_scaling() {
        let g = map(vec![1.0, 2.0, 5.0]);
        let p = map(g.data.iter().map(|v| 1.2 * v).collect());
        let m = depth_metrics(&p, &g, ScalingMode::None, &range()).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!(m.delta_1, 1.0);
        let ms = (1.0 + 4.0 + 25.0) / 3.0f64;
        assert!((m.rmse - 0.2 * ms.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn no_valid_pixels_is_an_error() {
        let g = map(vec![0.0, 0.0]);
        assert!(matches!(depth_metrics(&g, &g, ScalingMode::None, &range()), Err(Error::Domain(_))));
    }

    #[test]
    fn ten_degree_rotation() {
        let a = Pose6::new([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        let b = Pose6::new([0.0, 0.0, 10f64.to_radians()], [1.0, 0.0, 0.0]).unwrap();
        let m = pose_metrics(&[a], &[b]).unwrap();
        assert!((m.rot - 10.0).abs() < 1e-6);
        assert!(m.rte.abs() < 1e-12);
        assert!(pose_metrics(&[a], &[]).is_err());
    }

    #[test]
    fn pose_metrics_ignore_translation_scale() {
        let mut rng = rng_from_seed(3);
        let mut r = || rng.random_range(-1.0..1.0);
        let gt: Vec<Pose6> = (0..10).map(|_| Pose6::new([r(), r(), r()], [r(), r(), r()]).unwrap()).collect();
        let pred: Vec<Pose6> = (0..10).map(|_| Pose6::new([r(), r(), r()], [r(), r(), r()]).unwrap()).collect();
        let scaled: Vec<Pose6> = pred
            .iter()
            .map(|p| Pose6::new(p.rotation, p.translation.map(|t| 3.5 * t)).unwrap())
            .collect();
        let a = pose_metrics(&pred, &gt).unwrap();
        let b = pose_metrics(&scaled, &gt).unwrap();
        assert!((a.rte - b.rte).abs() < 1e-12);
        assert_eq!(a.rot, b.rot);
    }

    #[test]
    fn trajectory_accumulates() {
        assert_eq!(accumulate_trajectory(&[]).unwrap().len(), 1);
        let step = Pose6::new([0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        let t = accumulate_trajectory(&[step, step]).unwrap();
        let z: Vec<f64> = t.iter().map(|p| p.translation().z).collect();
        assert_eq!(z, vec![0.0, 1.0, 2.0]);
        let table = trajectory_table(&t);
        let back = parse_trajectory_table(&table).unwrap();
        assert_eq!(back[2], [0.0, 0.0, 2.0]);
    }

    #[test]
    fn plot_has_both_panels() {
        let a = vec![[0.0, 0.0, 0.0], [0.1, 0.05, 1.0], [0.3, 0.1, 2.0]];
        let img = plot_trajectories(&[a], 100);
        assert_eq!(img.dimensions(), (200, 100));
        let coloured = img.pixels().filter(|p| p.0 == PLOT_COLORS[0]).count();
        assert!(coloured > 20);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn median_scaling_removes_global_scale(
            gt in prop::collection::vec(0.5f64..15.0, 16),
            noise in prop::collection::vec(0.8f64..1.25, 16),
            k in 0.05f64..20.0,
        ) {
            let range = DepthScaleConfig { min_depth: 0.1, max_depth: 20.0 };
            let g = DepthMap::new(4, 4, gt.clone()).unwrap();
            let p: Vec<f64> = gt.iter().zip(&noise).map(|(a, b)| a * b).collect();
            let scaled: Vec<f64> = p.iter().map(|v| v * k).collect();
            let a = depth_metrics(&DepthMap::new(4, 4, p).unwrap(), &g, ScalingMode::Median, &range).unwrap();
            let b = depth_metrics(&DepthMap::new(4, 4, scaled).unwrap(), &g, ScalingMode::Median, &range).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
            let v = a.values();
            prop_assert!(v[5] <= v[6] && v[6] <= v[7]);
        }
    }
}
