//! C ABI over the cags engine.
//!
//! Handles are opaque; every fallible call returns a [`CagsStatus`] and, on
//! failure, records a message readable through [`cags_last_error_message`]
//! on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cags::checkpoint::Checkpoint;
use cags::deform::PoseCache;
use cags::model::Model;
use cags::scene::{self, BlendshapeMesh};
use cags::train::TrainState;
use cags::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CagsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Io = 5,
    Format = 6,
    NonFinite = 7,
    Degenerate = 8,
    Contract = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A trained model loaded from a checkpoint.
pub struct CagsModel {
    model: Model,
    mesh: BlendshapeMesh,
    cache: PoseCache,
    resolution: usize,
    expression_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CagsStatus {
    match e {
        Error::Dimension(_) => CagsStatus::Dimension,
        Error::Contract(_) => CagsStatus::Contract,
        Error::Degenerate(_) => CagsStatus::Degenerate,
        Error::Config(_) => CagsStatus::Config,
        Error::NonFinite(_) => CagsStatus::NonFinite,
        Error::Io { .. } => CagsStatus::Io,
        Error::Format(_) => CagsStatus::Format,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CagsStatus, String)>) -> CagsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CagsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CagsStatus::Panic
        }
    }
}

fn lift(e: Error) -> (CagsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CagsStatus, String) {
    (CagsStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cags_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cags_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by `cags train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cags_model_load(path: *const c_char, out: *mut *mut CagsModel) -> CagsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (CagsStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(lift)?;
        let (state, mesh) = TrainState::from_checkpoint(&ckpt).map_err(lift)?;
        let handle = CagsModel {
            resolution: state.config.scene.resolution,
            expression_dim: state.config.scene.expression_dim,
            cache: state.cache,
            model: state.model,
            mesh,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cags_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cags_model_free(model: *mut CagsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the expression code expected by [`cags_model_render`], or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cags_model_expression_dim(model: *const CagsModel) -> usize {
    model.as_ref().map_or(0, |m| m.expression_dim)
}

/// Side length in pixels of rendered images, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cags_model_resolution(model: *const CagsModel) -> usize {
    model.as_ref().map_or(0, |m| m.resolution)
}

/// Number of Gaussians in the model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cags_model_gaussian_count(model: *const CagsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.binding.len())
}

/// Renders one frame for expression `psi` seen from a camera orbited by
/// `yaw_degrees`, over a black background. Writes row-major H×W×3 values in
/// [0, 1] to `out_rgb`, which must hold `resolution² · 3` doubles.
///
/// # Safety
/// `psi` must point to `psi_len` doubles and `out_rgb` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cags_model_render(
    model: *mut CagsModel,
    psi: *const f64,
    psi_len: usize,
    yaw_degrees: f64,
    out_rgb: *mut f64,
    out_len: usize,
) -> CagsStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if psi.is_null() && psi_len > 0 {
            return Err(null("psi"));
        }
        if out_rgb.is_null() {
            return Err(null("out_rgb"));
        }
        if psi_len != m.expression_dim {
            return Err((
                CagsStatus::Dimension,
                format!("expression code has {psi_len} values, expected {}", m.expression_dim),
            ));
        }
        let need = m.resolution * m.resolution * 3;
        if out_len < need {
            return Err((
                CagsStatus::BufferTooSmall,
                format!("output buffer holds {out_len} values, need {need}"),
            ));
        }
        let psi: &[f64] = if psi_len == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(psi, psi_len)
        };
        let camera = scene::orbit_camera(m.resolution, yaw_degrees).map_err(lift)?;
        let fwd = m
            .model
            .forward(&m.mesh, psi, &camera, [0.0; 3], &mut m.cache)
            .map_err(lift)?;
        std::slice::from_raw_parts_mut(out_rgb, need).copy_from_slice(&fwd.image.rgb);
        Ok(())
    })
}
