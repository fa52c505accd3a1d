//! C interface to trained open-set segmentation models.
//!
//! A model is an opaque handle created by [`lidar_oss_model_load`] and
//! released with [`lidar_oss_model_free`]. Every fallible call returns a
//! [`LidarOssStatus`]; on failure the message for the calling thread is
//! available through [`lidar_oss_last_error`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lidar_oss::checkpoint::Checkpoint;
use lidar_oss::io::{Point, PointCloud};
use lidar_oss::openset::{segment, OpenSetConfig};
use lidar_oss::voxel::{voxelize, CylGrid};
use lidar_oss::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LidarOssStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Loaded checkpoint plus the grid and threshold used at inference.
pub struct LidarOssModel {
    checkpoint: Checkpoint,
    grid: CylGrid,
    openset: OpenSetConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> LidarOssStatus {
    match e {
        Error::Io { .. } => LidarOssStatus::Io,
        Error::Format { .. } | Error::Consistency(_) => LidarOssStatus::Format,
        Error::Config(_) => LidarOssStatus::Config,
        _ => LidarOssStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), (LidarOssStatus, String)>) -> LidarOssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LidarOssStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LidarOssStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (LidarOssStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (LidarOssStatus, String) {
    (LidarOssStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lidar_oss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failure on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lidar_oss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lidar_oss_model_load(path: *const c_char, out: *mut *mut LidarOssModel) -> LidarOssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (LidarOssStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let checkpoint = Checkpoint::load(PathBuf::from(path)).map_err(lib_err)?;
        let model = LidarOssModel {
            checkpoint,
            grid: CylGrid::default(),
            openset: OpenSetConfig::default(),
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`lidar_oss_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn lidar_oss_model_free(model: *mut LidarOssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of known classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lidar_oss_model_num_classes(model: *const LidarOssModel) -> u32 {
    model.as_ref().map_or(0, |m| m.checkpoint.known.len() as u32)
}

/// Copies the known class ids (ascending) into `out`, which holds `cap`
/// entries. `*written` receives the number of ids, also when the buffer is
/// too small.
///
/// # Safety
/// `out` must point to `cap` writable `u16`s and `written` be valid.
#[no_mangle]
pub unsafe extern "C" fn lidar_oss_model_known_classes(
    model: *const LidarOssModel,
    out: *mut u16,
    cap: usize,
    written: *mut usize,
) -> LidarOssStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let w = written.as_mut().ok_or_else(|| null("written"))?;
        let ids = m.checkpoint.known.ids();
        *w = ids.len();
        if cap < ids.len() {
            return Err((LidarOssStatus::BufferTooSmall, format!("need {} entries", ids.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(ids.as_ptr(), out, ids.len());
        Ok(())
    })
}

/// Sets the unknown threshold and the label written for unknown points.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lidar_oss_model_set_openset(
    model: *mut LidarOssModel,
    xi: f64,
    unknown_id: u16,
) -> LidarOssStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let cfg = OpenSetConfig {
            xi,
            unknown_output_id: unknown_id,
            ..m.openset.clone()
        };
        cfg.validate(&m.checkpoint.known).map_err(lib_err)?;
        m.openset = cfg;
        Ok(())
    })
}

/// Replaces the voxel grid: radial and height ranges, then bin counts
/// along radius, azimuth and height.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lidar_oss_model_set_grid(
    model: *mut LidarOssModel,
    rho_min: f64,
    rho_max: f64,
    z_min: f64,
    z_max: f64,
    n_rho: u32,
    n_phi: u32,
    n_z: u32,
) -> LidarOssStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let grid = CylGrid {
            rho: [rho_min, rho_max],
            z: [z_min, z_max],
            bins: [n_rho as usize, n_phi as usize, n_z as usize],
        };
        grid.validate().map_err(lib_err)?;
        m.grid = grid;
        Ok(())
    })
}

/// Segments one scan. `points` holds `n` records of `x, y, z, intensity`.
/// Writes one label and one anomaly score per point; points outside the
/// grid get the unknown label and an infinite score. Either output may be
/// null to skip it.
///
/// # Safety
/// `points` must hold `4 * n` floats; non-null outputs must hold `n`
/// entries each.
#[no_mangle]
pub unsafe extern "C" fn lidar_oss_infer(
    model: *const LidarOssModel,
    points: *const f32,
    n: usize,
    labels_out: *mut u16,
    scores_out: *mut f32,
) -> LidarOssStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if points.is_null() && n > 0 {
            return Err(null("points"));
        }
        let raw: &[f32] = if n == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(points, n * 4)
        };
        let cloud = PointCloud::new(raw.chunks_exact(4).map(|p| Point::new(p[0], p[1], p[2], p[3])).collect());
        if let Some(i) = cloud.points.iter().position(|p| !p.is_finite()) {
            return Err((LidarOssStatus::InvalidArgument, format!("point {i} is not finite")));
        }
        let mapping = voxelize(&cloud, &m.grid);
        let (f_s, f_o) = m.checkpoint.net.infer(&cloud, &mapping);
        let res = segment(&f_s, &f_o, &mapping, &m.checkpoint.known, &m.openset);
        if !labels_out.is_null() {
            std::ptr::copy_nonoverlapping(res.point_labels.as_ptr(), labels_out, n);
        }
        if let Some(out) = scores_out.as_mut() {
            let out = std::slice::from_raw_parts_mut(out, n);
            for (o, s) in out.iter_mut().zip(&res.point_scores) {
                *o = *s as f32;
            }
        }
        Ok(())
    })
}
