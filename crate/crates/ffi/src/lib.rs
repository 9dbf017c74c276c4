//! C ABI over a trained varfuse checkpoint.
//!
//! A model is loaded into an opaque [`VfModel`] handle, run on planar `f64`
//! images and released with [`vf_model_free`]. Every fallible call returns a
//! [`VfStatus`]; the message of the most recent failure on the calling thread
//! is available from [`vf_last_error_message`]. Panics never cross the
//! boundary: they are reported as [`VfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use varfuse::fusion::SampleMode;
use varfuse::network::{BackboneConfig, FusionMode, Network};
use varfuse::tensor::Tensor;
use varfuse::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Data = 5,
    Config = 6,
    Checkpoint = 7,
    Io = 8,
    Panic = 9,
}

impl VfStatus {
    fn from_error(e: &Error) -> Self {
        match e.category() {
            "shape" => Self::Shape,
            "argument" => Self::InvalidArgument,
            "numeric" => Self::Numeric,
            "data" => Self::Data,
            "config" => Self::Config,
            "checkpoint" => Self::Checkpoint,
            _ => Self::Io,
        }
    }
}

/// Opaque handle to a loaded network.
pub struct VfModel {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: VfStatus, msg: &str) -> VfStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (VfStatus, String)>) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VfStatus::Ok,
        Ok(Err((status, msg))) => fail(status, &msg),
        Err(_) => fail(VfStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: varfuse::Result<T>) -> Result<T, (VfStatus, String)> {
    r.map_err(|e| (VfStatus::from_error(&e), e.to_string()))
}

fn null(what: &str) -> (VfStatus, String) {
    (VfStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `varfuse train`. On success `*out` owns a
/// new handle; on failure it is set to null.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (VfStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let (net, _, _) = lift(varfuse::train::load_network(Path::new(path)))?;
        *out = Box::into_raw(Box::new(VfModel { net }));
        Ok(())
    })
}

/// Releases a handle from [`vf_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_model_classes(model: *const VfModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.classes())
}

/// Number of fusion levels that produce a fusion-factor map: every level for
/// probabilistic and attention fusion, none for addition or a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_model_factor_levels(model: *const VfModel) -> usize {
    model.as_ref().map_or(0, |m| match m.net.config.fusion_mode {
        FusionMode::Addition => 0,
        _ => BackboneConfig::strides().len(),
    })
}

unsafe fn inputs(rgb: *const f64, thermal: *const f64, height: usize, width: usize) -> Result<(Tensor, Tensor), (VfStatus, String)> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    if thermal.is_null() {
        return Err(null("thermal"));
    }
    if height == 0 || width == 0 {
        return Err((VfStatus::InvalidArgument, "image size must be positive".into()));
    }
    let plane = height * width;
    let rgb = lift(Tensor::from_vec([1, 3, height, width], std::slice::from_raw_parts(rgb, 3 * plane).to_vec()))?;
    let thermal = lift(Tensor::from_vec([1, 1, height, width], std::slice::from_raw_parts(thermal, plane).to_vec()))?;
    Ok((rgb, thermal))
}

/// Segments one image pair.
///
/// `rgb` holds `3 * height * width` values and `thermal` `height * width`,
/// both planar row-major in `[0, 1]`. Height and width must be multiples of
/// 32. `labels` receives `height * width` class ids. `confidence`, when not
/// null, receives `classes * height * width` softmax values. `samples == 1`
/// uses the posterior mean; larger counts average that many latent draws
/// seeded from `seed`.
///
/// # Safety
/// All non-null pointers must reference buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn vf_model_infer(
    model: *const VfModel,
    rgb: *const f64,
    thermal: *const f64,
    height: usize,
    width: usize,
    samples: usize,
    seed: u64,
    labels: *mut u8,
    confidence: *mut f64,
) -> VfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let (rgb, thermal) = inputs(rgb, thermal, height, width)?;
        let seg = lift(model.net.infer_averaged(&rgb, &thermal, samples, seed))?;
        let plane = height * width;
        std::slice::from_raw_parts_mut(labels, plane).copy_from_slice(&seg.labels[0].data);
        if !confidence.is_null() {
            let src = seg.confidence.data();
            std::slice::from_raw_parts_mut(confidence, src.len()).copy_from_slice(src);
        }
        Ok(())
    })
}

/// Fusion-factor map of one level from a posterior-mean pass. Level `l` has
/// stride `2^(l+1)`, so `factor` receives `(height >> (l+1)) * (width >> (l+1))`
/// values in `[0, 1]`; `len` is its capacity and must match exactly.
///
/// # Safety
/// All non-null pointers must reference buffers of the sizes described.
#[no_mangle]
pub unsafe extern "C" fn vf_model_fusion_factor(
    model: *const VfModel,
    rgb: *const f64,
    thermal: *const f64,
    height: usize,
    width: usize,
    level: usize,
    factor: *mut f64,
    len: usize,
) -> VfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if factor.is_null() {
            return Err(null("factor"));
        }
        let (rgb, thermal) = inputs(rgb, thermal, height, width)?;
        let out = lift(model.net.forward_mode(&rgb, &thermal, SampleMode::PosteriorMean))?;
        let map = out.factors.get(level).ok_or_else(|| {
            (VfStatus::InvalidArgument, format!("level {level} out of range (model has {} factor maps)", out.factors.len()))
        })?;
        let src = map.values.data();
        if src.len() != len {
            return Err((VfStatus::Shape, format!("factor buffer holds {len} values, level {level} needs {}", src.len())));
        }
        std::slice::from_raw_parts_mut(factor, len).copy_from_slice(src);
        Ok(())
    })
}
