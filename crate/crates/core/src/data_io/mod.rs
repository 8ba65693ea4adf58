//! Sequence manifests, image and pose files, depth corpora, the synthetic
//! tube renderer and checkpoint persistence.

mod checkpoint;
mod synth;

pub use checkpoint::{decode as decode_checkpoint, file_sha256, load_checkpoint, save_checkpoint, CheckpointBundle, OptimizerState, FORMAT_VERSION};
pub use synth::{generate_synthetic_scene, render_scene, SyntheticScene, SyntheticSceneSpec};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6};
use crate::kv;
use crate::raster::{DepthMap, Image};
use crate::training::FrameTriplet;

const MANIFEST_KEYS: [&str; 10] = [
    "rgb_dir", "depth_dir", "poses", "fx", "fy", "cx", "cy", "width", "height", "max_depth",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    /// Directory the relative paths are resolved against.
    pub root: PathBuf,
    pub rgb_dir: String,
    pub depth_dir: Option<String>,
    /// Camera-to-world poses, one line per frame.
    pub pose_file: Option<String>,
    pub intrinsics: CameraIntrinsics,
    /// Metric depth of a stored value of 65535.
    pub max_depth: f64,
}

impl SequenceManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let map = kv::read(path)?;
        if let Some(k) = map.keys().find(|k| !MANIFEST_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("{}: unknown manifest key `{k}`", path.display())));
        }
        let intrinsics = CameraIntrinsics::new(
            kv::get(&map, "fx")?,
            kv::get(&map, "fy")?,
            kv::get(&map, "cx")?,
            kv::get(&map, "cy")?,
            kv::get(&map, "width")?,
            kv::get(&map, "height")?,
        )
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let max_depth: f64 = kv::get(&map, "max_depth")?;
        if !(max_depth > 0.0 && max_depth.is_finite()) {
            return Err(Error::Config(format!("max_depth must be positive, got {max_depth}")));
        }
        Ok(SequenceManifest {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            rgb_dir: kv::get(&map, "rgb_dir")?,
            depth_dir: kv::get_opt(&map, "depth_dir")?,
            pose_file: kv::get_opt(&map, "poses")?,
            intrinsics,
            max_depth,
        })
    }

    pub fn render(&self) -> String {
        let k = &self.intrinsics;
        let mut e: Vec<(&str, String)> = vec![("rgb_dir", self.rgb_dir.clone())];
        if let Some(d) = &self.depth_dir {
            e.push(("depth_dir", d.clone()));
        }
        if let Some(p) = &self.pose_file {
            e.push(("poses", p.clone()));
        }
        e.extend([
            ("fx", format!("{:?}", k.fx)),
            ("fy", format!("{:?}", k.fy)),
            ("cx", format!("{:?}", k.cx)),
            ("cy", format!("{:?}", k.cy)),
            ("width", k.width.to_string()),
            ("height", k.height.to_string()),
            ("max_depth", format!("{:?}", self.max_depth)),
        ]);
        kv::render(e)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Frame file names in `rgb_dir`, sorted.
    pub fn frame_names(&self) -> Result<Vec<String>> {
        png_names(&self.root.join(&self.rgb_dir))
    }
}

/// Sorted `*.png` names in `dir`.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_image<P: image::PixelWithColorType>(
    path: &Path,
    img: &ImageBuffer<P, Vec<P::Subpixel>>,
) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Reads an 8-bit RGB PNG into [0, 1].
pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = open_image(path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(b) => b,
        other if other.color().channel_count() >= 3 && other.color().bytes_per_pixel() / other.color().channel_count() == 1 => other.to_rgb8(),
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::zeros(3, h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::domain(format!("RGB output needs 3 channels, got {}", img.channels)));
    }
    let buf = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        Rgb(std::array::from_fn(|c| quantize8(img.at(c, y as usize, x as usize))))
    });
    save_image(path, &buf)
}

/// Reads a single-channel PNG as values in [0, 1] (16-bit or 8-bit).
pub fn read_normalized_gray(path: &Path) -> Result<DepthMap> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        image::DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("expected a grayscale depth image, found {:?}", other.color()),
            })
        }
    };
    DepthMap::new(h, w, data)
}

/// Reads a 16-bit depth PNG, mapping `v ↦ (v / 65535)·max_depth`.
pub fn read_depth(path: &Path, max_depth: f64) -> Result<DepthMap> {
    let mut d = read_normalized_gray(path)?;
    for v in &mut d.data {
        *v *= max_depth;
    }
    Ok(d)
}

pub fn write_depth(path: &Path, depth: &DepthMap, max_depth: f64) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            Luma([quantize16(depth.at(y as usize, x as usize) / max_depth)])
        });
    save_image(path, &buf)
}

/// Tiles maps with values in [0, 1] into one 8-bit grayscale sheet,
/// `cols` per row, separated by one-pixel gaps.
pub fn write_map_grid(path: &Path, maps: &[DepthMap], cols: usize) -> Result<()> {
    let Some(first) = maps.first() else {
        return Err(Error::domain("no maps to tile"));
    };
    let (h, w) = (first.height, first.width);
    if maps.iter().any(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::domain("grid maps differ in size"));
    }
    let cols = cols.clamp(1, maps.len());
    let rows = maps.len().div_ceil(cols);
    let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_pixel((cols * (w + 1) - 1) as u32, (rows * (h + 1) - 1) as u32, Luma([255]));
    for (i, m) in maps.iter().enumerate() {
        let (ox, oy) = ((i % cols) * (w + 1), (i / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([quantize8(m.at(y, x))]));
            }
        }
    }
    save_image(path, &buf)
}

/// The value a depth map holds after a write/read round trip.
pub fn quantize_depth(d: f64, max_depth: f64) -> f64 {
    quantize16(d / max_depth) as f64 / 65535.0 * max_depth
}

/// Parses `tx ty tz rx ry rz` lines.
pub fn parse_poses(text: &str, origin: &str) -> Result<Vec<Pose6>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{origin}:{}: {e}", i + 1)))?;
        if v.len() != 6 {
            return Err(Error::Format(format!("{origin}:{}: expected 6 numbers, got {}", i + 1, v.len())));
        }
        out.push(Pose6::new([v[3], v[4], v[5]], [v[0], v[1], v[2]])?);
    }
    Ok(out)
}

/// Component order of quaternion pose logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuatOrder {
    /// `tx ty tz qx qy qz qw` (SimCol, most EndoSLAM capsules).
    Xyzw,
    /// `tx ty tz qw qx qy qz`.
    Wxyz,
}

/// Converts camera-to-world quaternion pose lines to [`Pose6`], multiplying
/// translations by `unit_scale`. Assumes Hamilton quaternions; lines with a
/// leading frame index (8 numbers) are accepted and the index is dropped.
pub fn parse_quaternion_poses(text: &str, order: QuatOrder, unit_scale: f64, origin: &str) -> Result<Vec<Pose6>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |m: String| Error::Format(format!("{origin}:{}: {m}", i + 1));
        let mut v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| at(e.to_string()))?;
        if v.len() == 8 {
            v.remove(0);
        }
        if v.len() != 7 {
            return Err(at(format!("expected 7 numbers, got {}", v.len())));
        }
        let (w, x, y, z) = match order {
            QuatOrder::Xyzw => (v[6], v[3], v[4], v[5]),
            QuatOrder::Wxyz => (v[3], v[4], v[5], v[6]),
        };
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-9) {
            return Err(at("degenerate quaternion".into()));
        }
        let r = nalgebra::UnitQuaternion::from_quaternion(q).scaled_axis();
        let t = [v[0] * unit_scale, v[1] * unit_scale, v[2] * unit_scale];
        out.push(Pose6::new([r.x, r.y, r.z], t)?);
    }
    Ok(out)
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose6>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, &path.display().to_string())
}

pub fn render_poses(poses: &[Pose6]) -> String {
    let mut s = String::new();
    for p in poses {
        let (t, r) = (p.translation, p.rotation);
        s.push_str(&format!(
            "{:?} {:?} {:?} {:?} {:?} {:?}\n",
            t[0], t[1], t[2], r[0], r[1], r[2]
        ));
    }
    s
}

pub fn write_poses(path: &Path, poses: &[Pose6]) -> Result<()> {
    std::fs::write(path, render_poses(poses)).map_err(|e| Error::io(path, e))
}

/// `T_src←tgt` from two camera-to-world poses.
pub fn relative_pose(src_c2w: &Pose6, tgt_c2w: &Pose6) -> Result<Pose6> {
    Ok(src_c2w.to_se3()?.inverse().compose(&tgt_c2w.to_se3()?).to_pose6())
}

/// A loaded sequence with optional ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub names: Vec<String>,
    pub frames: Vec<Image>,
    pub depths: Option<Vec<DepthMap>>,
    /// Camera-to-world.
    pub poses: Option<Vec<Pose6>>,
    pub intrinsics: CameraIntrinsics,
    pub max_depth: f64,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Overlapping `(t−1, t, t+1)` windows for `t = 1..len−1`.
    pub fn triplets(&self) -> impl Iterator<Item = FrameTriplet> + '_ {
        (1..self.len().saturating_sub(1)).map(move |t| {
            let gt_rel = self.poses.as_ref().map(|p| {
                (
                    relative_pose(&p[t - 1], &p[t]).expect("validated poses"),
                    relative_pose(&p[t + 1], &p[t]).expect("validated poses"),
                )
            });
            FrameTriplet {
                index: t,
                prev: self.frames[t - 1].clone(),
                cur: self.frames[t].clone(),
                next: self.frames[t + 1].clone(),
                intrinsics: self.intrinsics,
                gt_depth: self.depths.as_ref().map(|d| d[t].clone()),
                gt_rel,
            }
        })
    }

    /// Relative ground-truth poses `T_{t}←{t+1}` between consecutive frames.
    pub fn gt_relative_poses(&self) -> Option<Result<Vec<Pose6>>> {
        self.poses.as_ref().map(|p| p.windows(2).map(|w| relative_pose(&w[0], &w[1])).collect())
    }
}

pub fn load_sequence(manifest: &SequenceManifest) -> Result<Sequence> {
    let names = manifest.frame_names()?;
    if names.len() < 3 {
        return Err(Error::domain(format!(
            "sequence in {} has {} frames, need at least 3",
            manifest.root.join(&manifest.rgb_dir).display(),
            names.len()
        )));
    }
    let k = manifest.intrinsics;
    let mut frames = Vec::with_capacity(names.len());
    for n in &names {
        let p = manifest.root.join(&manifest.rgb_dir).join(n);
        let im = read_rgb(&p)?;
        if (im.height, im.width) != (k.height, k.width) {
            return Err(Error::Decode {
                path: p,
                message: format!("image is {}x{}, manifest says {}x{}", im.height, im.width, k.height, k.width),
            });
        }
        frames.push(im);
    }
    let depths = match &manifest.depth_dir {
        None => None,
        Some(dir) => {
            let mut v = Vec::with_capacity(names.len());
            for n in &names {
                let p = manifest.root.join(dir).join(n);
                let d = read_depth(&p, manifest.max_depth)?;
                if (d.height, d.width) != (k.height, k.width) {
                    return Err(Error::Decode {
                        path: p,
                        message: "depth size differs from the manifest".into(),
                    });
                }
                v.push(d);
            }
            Some(v)
        }
    };
    let poses = match &manifest.pose_file {
        None => None,
        Some(f) => {
            let p = manifest.root.join(f);
            let poses = read_poses(&p)?;
            if poses.len() != names.len() {
                return Err(Error::Format(format!(
                    "{}: {} poses for {} frames",
                    p.display(),
                    poses.len(),
                    names.len()
                )));
            }
            Some(poses)
        }
    };
    Ok(Sequence {
        names,
        frames,
        depths,
        poses,
        intrinsics: k,
        max_depth: manifest.max_depth,
    })
}

/// Loads every depth PNG in `dir` as a map with values in [0, 1].
pub fn load_depth_corpus(dir: &Path) -> Result<Vec<DepthMap>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let names = png_names(dir)?;
    let maps = names
        .iter()
        .map(|n| read_normalized_gray(&dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    if maps.is_empty() {
        return Err(Error::domain(format!("no depth images in {}", dir.display())));
    }
    Ok(maps)
}

/// Writes a flat `key = value` record.
pub fn write_record(path: &Path, record: &BTreeMap<String, String>) -> Result<()> {
    let text = kv::render(record.iter().map(|(k, v)| (k.as_str(), v.clone())));
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
