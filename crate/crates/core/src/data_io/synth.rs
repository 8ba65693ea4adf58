//! Procedural textured tube scenes with exact depth and camera poses.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quantize16, quantize8, write_depth, write_poses, write_rgb, SequenceManifest};
use crate::error::{Error, Result};
use crate::geometry::{rotation_from_axis_angle, CameraIntrinsics, Pose6, Se3};
use crate::nn::rng_from_seed;
use crate::raster::{DepthMap, Image};

const TEXTURE_WAVES: usize = 10;
const MIN_STEP: f64 = 1e-4;
const MAX_MARCH: usize = 200_000;

/// Tube along world +z closed by a flat cap at `z = length`; the camera
/// moves down the tube looking along +z with y pointing down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; the principal point sits at `(w/2, h/2)`.
    pub focal: f64,
    pub radius: f64,
    /// Relative radius modulation `r(z) = radius·(1 + a·sin(2πz/period))`.
    pub radius_amplitude: f64,
    pub radius_period: f64,
    pub length: f64,
    pub texture_seed: u64,
    pub start_z: f64,
    /// Forward motion per frame.
    pub step: f64,
    /// Lateral sway amplitudes in x and y.
    pub sway: [f64; 2],
    /// Sway period in frames.
    pub sway_period: f64,
    /// Turn the camera along the path tangent.
    pub follow_path: bool,
    pub max_depth: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            frames: 10,
            width: 64,
            height: 64,
            focal: 48.0,
            radius: 2.0,
            radius_amplitude: 0.05,
            radius_period: 3.0,
            length: 8.0,
            texture_seed: 7,
            start_z: 0.0,
            step: 0.2,
            sway: [0.25, 0.15],
            sway_period: 40.0,
            follow_path: true,
            max_depth: 20.0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return bad("frames, width and height must be positive".into());
        }
        let pos = [self.focal, self.radius, self.radius_period, self.max_depth, self.sway_period];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("focal, radius, radius_period, sway_period and max_depth must be positive".into());
        }
        if !(0.0..0.5).contains(&self.radius_amplitude) {
            return bad(format!("radius_amplitude {} must lie in [0, 0.5)", self.radius_amplitude));
        }
        let reach = self.sway[0].hypot(self.sway[1] * 2.0);
        if reach >= self.radius * (1.0 - self.radius_amplitude) {
            return bad("camera path leaves the tube".into());
        }
        let last_z = self.start_z + self.step * (self.frames - 1) as f64;
        if self.start_z.max(last_z) >= self.length {
            return bad(format!("camera reaches the end cap at z = {}", self.length));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    fn radius_at(&self, z: f64) -> f64 {
        self.radius * (1.0 + self.radius_amplitude * (2.0 * PI * z / self.radius_period).sin())
    }

    fn radius_slope(&self, z: f64) -> f64 {
        self.radius * self.radius_amplitude * 2.0 * PI / self.radius_period
            * (2.0 * PI * z / self.radius_period).cos()
    }

    /// Camera-to-world pose of frame `t`.
    pub fn pose_at(&self, t: usize) -> Result<Pose6> {
        let w = 2.0 * PI / self.sway_period;
        let ph = w * t as f64;
        let pos = Vector3::new(
            self.sway[0] * ph.sin(),
            self.sway[1] * (1.0 - ph.cos()),
            self.start_z + self.step * t as f64,
        );
        let tangent = Vector3::new(self.sway[0] * w * ph.cos(), self.sway[1] * w * ph.sin(), self.step);
        let r = if self.follow_path && tangent.norm() > 0.0 {
            let d = tangent.normalize();
            let yaw = d.x.atan2(d.z);
            let pitch = -d.y.asin();
            rotation_from_axis_angle([0.0, yaw, 0.0]) * rotation_from_axis_angle([pitch, 0.0, 0.0])
        } else {
            Matrix3::identity()
        };
        Ok(Se3::from_parts(r, pos).to_pose6())
    }
}

struct Texture {
    waves: Vec<(Vector3<f64>, f64, f64)>,
    tint: Vec<(Vector3<f64>, f64)>,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let dir = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            v.normalize() * rng.random_range(lo..hi)
        };
        let waves = (0..TEXTURE_WAVES)
            .map(|_| (dir(&mut rng, 3.0, 8.0), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0)))
            .collect();
        let tint = (0..3).map(|_| (dir(&mut rng, 1.0, 2.5), rng.random_range(0.0..2.0 * PI))).collect();
        Texture { waves, tint }
    }

    fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let total: f64 = self.waves.iter().map(|w| w.2).sum();
        let m = self.waves.iter().map(|(k, ph, a)| a * (k.dot(p) + ph).sin()).sum::<f64>() / total;
        let base = [0.85, 0.5, 0.42];
        std::array::from_fn(|c| {
            let (k, ph) = &self.tint[c];
            base[c] * (0.55 + 0.4 * m + 0.05 * (k.dot(p) + ph).sin())
        })
    }
}

/// Offset line light parallel to the axis plus a weak directional light
/// shining down the tube; both fixed in the world.
const LINE_LIGHT: [f64; 2] = [0.5, -0.4];

fn shade(n: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let to_line = Vector3::new(LINE_LIGHT[0] - p.x, LINE_LIGHT[1] - p.y, 0.0);
    let line = if to_line.norm() > 0.0 {
        n.dot(&to_line.normalize()).max(0.0)
    } else {
        0.0
    };
    let back = n.dot(&Vector3::new(0.0, 0.0, -1.0)).max(0.0);
    0.35 + 0.45 * line + 0.2 * back
}

/// Casts the ray `o + s·d` and returns `(s, point, inward normal)`.
fn cast(spec: &SyntheticSceneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> Result<(f64, Vector3<f64>, Vector3<f64>)> {
    let f = |s: f64| {
        let p = o + d * s;
        spec.radius_at(p.z) - p.x.hypot(p.y)
    };
    if f(0.0) <= 0.0 {
        return Err(Error::domain("camera outside the tube"));
    }
    let s_cap = if d.z > 0.0 { (spec.length - o.z) / d.z } else { f64::INFINITY };
    let lip = d.x.hypot(d.y) + spec.radius * spec.radius_amplitude * 2.0 * PI / spec.radius_period * d.z.abs();
    let mut s = 0.0;
    let mut fs = f(s);
    for _ in 0..MAX_MARCH {
        let next = s + (fs / lip).max(MIN_STEP);
        if next >= s_cap {
            if f(s_cap) > 0.0 {
                return Ok((s_cap, o + d * s_cap, Vector3::new(0.0, 0.0, -1.0)));
            }
        }
        let next = next.min(s_cap);
        let fn_ = f(next);
        if fn_ <= 0.0 {
            let (mut lo, mut hi) = (s, next);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let p = o + d * hi;
            let rho = p.x.hypot(p.y);
            let n = -Vector3::new(p.x / rho, p.y / rho, -spec.radius_slope(p.z)).normalize();
            return Ok((hi, p, n));
        }
        s = next;
        fs = fn_;
    }
    Err(Error::domain("ray did not hit the tube"))
}

/// Renders one frame: colour and camera-z depth.
fn render_frame(spec: &SyntheticSceneSpec, tex: &Texture, c2w: &Se3, k: &CameraIntrinsics) -> Result<(Image, DepthMap)> {
    let (h, w) = (spec.height, spec.width);
    let mut img = Image::zeros(3, h, w);
    let mut depth = DepthMap::filled(h, w, 0.0);
    let r = c2w.rotation();
    let o = c2w.translation();
    for y in 0..h {
        for x in 0..w {
            let dc = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let d = r * dc;
            let (s, p, n) = cast(spec, &o, &d)?;
            let a = tex.albedo(&p);
            let l = shade(&n, &p);
            for c in 0..3 {
                img.set(c, y, x, (a[c] * l).clamp(0.0, 1.0));
            }
            depth.data[y * w + x] = s;
        }
    }
    Ok((img, depth))
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub images: Vec<Image>,
    /// Camera-z depth in scene units.
    pub depths: Vec<DepthMap>,
    /// Camera-to-world.
    pub poses: Vec<Pose6>,
    pub intrinsics: CameraIntrinsics,
    pub max_depth: f64,
    /// Every frame shares one pose.
    pub degenerate: bool,
}

/// Renders every frame in memory. With `quantize` the images and depths
/// hold exactly the values a PNG round trip produces.
pub fn render_scene(spec: &SyntheticSceneSpec, quantize: bool) -> Result<SyntheticScene> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let tex = Texture::new(spec.texture_seed);
    let poses = (0..spec.frames).map(|t| spec.pose_at(t)).collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(spec.frames);
    let mut depths = Vec::with_capacity(spec.frames);
    for p in &poses {
        let (mut img, mut d) = render_frame(spec, &tex, &p.to_se3()?, &k)?;
        if let Some(bad) = d.data.iter().find(|v| !(**v > 0.0 && **v <= spec.max_depth)) {
            return Err(Error::domain(format!("rendered depth {bad} outside (0, {}]", spec.max_depth)));
        }
        if quantize {
            for v in &mut img.data {
                *v = quantize8(*v) as f64 / 255.0;
            }
            for v in &mut d.data {
                *v = quantize16(*v / spec.max_depth) as f64 / 65535.0 * spec.max_depth;
            }
        }
        images.push(img);
        depths.push(d);
    }
    let degenerate = poses.windows(2).all(|w| w[0] == w[1]);
    Ok(SyntheticScene {
        images,
        depths,
        poses,
        intrinsics: k,
        max_depth: spec.max_depth,
        degenerate,
    })
}

/// Renders and writes `rgb/`, `depth/`, `poses.txt` and `manifest.txt`
/// under `out_dir`, returning the in-memory scene and the manifest path.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<(SyntheticScene, PathBuf)> {
    let scene = render_scene(spec, true)?;
    if scene.degenerate {
        log::warn!("synthetic trajectory has no motion; frames are identical");
    }
    let rgb = out_dir.join("rgb");
    let dep = out_dir.join("depth");
    for d in [&rgb, &dep] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (t, (img, d)) in scene.images.iter().zip(&scene.depths).enumerate() {
        let name = format!("{t:06}.png");
        write_rgb(&rgb.join(&name), img)?;
        write_depth(&dep.join(&name), d, spec.max_depth)?;
    }
    write_poses(&out_dir.join("poses.txt"), &scene.poses)?;
    let manifest = SequenceManifest {
        root: out_dir.to_path_buf(),
        rgb_dir: "rgb".into(),
        depth_dir: Some("depth".into()),
        pose_file: Some("poses.txt".into()),
        intrinsics: scene.intrinsics,
        max_depth: spec.max_depth,
    };
    let path = out_dir.join("manifest.txt");
    manifest.write(&path)?;
    Ok((scene, path))
}
