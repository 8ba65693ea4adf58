//! C interface to `endodepth`: load a trained checkpoint, predict depth and
//! relative pose, score depth maps.
//!
//! Every function returns an [`EdStatus`]. On failure a message is kept per
//! thread and can be copied out with [`ed_last_error`]. Panics are caught at
//! the boundary and reported as `ED_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use endodepth::cli::load_trained;
use endodepth::depth_net::DepthScaleConfig;
use endodepth::eval_metrics::{depth_metrics, ScalingMode};
use endodepth::raster::{DepthMap, Image};
use endodepth::training::{Model, ModelParams};
use endodepth::Error;

/// Result codes. The first four match the command line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdStatus {
    Ok = 0,
    Runtime = 1,
    Config = 2,
    NotFound = 3,
    NullPointer = 4,
    InvalidArgument = 5,
    BadCheckpoint = 6,
    Panic = 7,
}

/// Trained model loaded from a checkpoint. Opaque to C.
pub struct EdModel {
    model: Model,
    params: ModelParams,
    use_bank: bool,
    size: usize,
}

/// The eight depth statistics, in the order of the metrics record.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EdDepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub l1: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EdStatus {
    match e {
        Error::Config(_) => EdStatus::Config,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EdStatus::NotFound,
        Error::Version { .. } | Error::Truncated { .. } | Error::Format(_) | Error::Decode { .. } => {
            EdStatus::BadCheckpoint
        }
        Error::Shape(_) | Error::Domain(_) => EdStatus::InvalidArgument,
        _ => EdStatus::Runtime,
    }
}

struct Fail(EdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            EdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EdStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: String) -> Fail {
    Fail(EdStatus::InvalidArgument, msg)
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `len` writable values.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn rgb_image(rgb: &[u8], width: usize, height: usize) -> Result<Image, Fail> {
    let mut img = Image::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                img.set(c, y, x, rgb[(y * width + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

impl EdModel {
    fn check_size(&self, width: usize, height: usize) -> Result<(), Fail> {
        if width != self.size || height != self.size {
            return Err(invalid(format!(
                "model expects {0}x{0} images, got {width}x{height}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `cap > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ed_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map(|c| c.as_bytes()).unwrap_or(b"");
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint written by `endodepth train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_model_load(path: *const c_char, out: *mut *mut EdModel) -> EdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8".into()))?;
        let (cfg, model, params) = load_trained(Path::new(p))?;
        let size = model.cfg.bank_resolution();
        *out = Box::into_raw(Box::new(EdModel {
            model,
            params,
            use_bank: cfg.use_latent_bank,
            size,
        }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`ed_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ed_model_free(model: *mut EdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square input side length the model was trained at.
///
/// # Safety
/// `model` and `side` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ed_model_input_size(model: *const EdModel, side: *mut usize) -> EdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *side.as_mut().ok_or_else(|| null("side"))? = m.size;
        Ok(())
    })
}

/// Predicts a depth map from an interleaved 8-bit RGB image
/// (`width*height*3` bytes, row major). Writes `width*height` depths.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ed_predict_depth(
    model: *const EdModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    depth_out: *mut f64,
) -> EdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.check_size(width, height)?;
        let img = rgb_image(slice(rgb, width * height * 3, "rgb")?, width, height)?;
        let out = slice_mut(depth_out, width * height, "depth_out")?;
        let d = m.model.infer_depth(&m.params, &[&img], m.use_bank)?;
        out.copy_from_slice(&d[0].data);
        Ok(())
    })
}

/// Predicts the relative pose taking points from `target`'s camera into
/// `source`'s. Writes `[rx, ry, rz, tx, ty, tz]` (axis-angle, translation).
///
/// # Safety
/// Image buffers must hold `width*height*3` bytes; `pose_out` six values.
#[no_mangle]
pub unsafe extern "C" fn ed_predict_pose(
    model: *const EdModel,
    source_rgb: *const u8,
    target_rgb: *const u8,
    width: usize,
    height: usize,
    pose_out: *mut f64,
) -> EdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.check_size(width, height)?;
        let n = width * height * 3;
        let a = rgb_image(slice(source_rgb, n, "source_rgb")?, width, height)?;
        let b = rgb_image(slice(target_rgb, n, "target_rgb")?, width, height)?;
        let out = slice_mut(pose_out, 6, "pose_out")?;
        let q = m.model.infer_pose(&m.params, &[&a], &[&b])?;
        out.copy_from_slice(&q[0].mean);
        Ok(())
    })
}

/// Depth error statistics between two `width*height` maps. Ground-truth
/// pixels outside `[min_depth, max_depth]` are ignored. With `median_scaling`
/// nonzero the prediction is first rescaled by the ratio of medians.
///
/// # Safety
/// Buffers must hold `width*height` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_depth_metrics(
    pred: *const f64,
    gt: *const f64,
    width: usize,
    height: usize,
    min_depth: f64,
    max_depth: f64,
    median_scaling: i32,
    out: *mut EdDepthMetrics,
) -> EdStatus {
    guard(|| {
        let n = width * height;
        let p = DepthMap::new(height, width, slice(pred, n, "pred")?.to_vec())?;
        let g = DepthMap::new(height, width, slice(gt, n, "gt")?.to_vec())?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let range = DepthScaleConfig { min_depth, max_depth };
        let mode = if median_scaling != 0 { ScalingMode::Median } else { ScalingMode::None };
        let v = depth_metrics(&p, &g, mode, &range)?.values();
        *out = EdDepthMetrics {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            l1: v[4],
            delta_1: v[5],
            delta_2: v[6],
            delta_3: v[7],
        };
        Ok(())
    })
}
