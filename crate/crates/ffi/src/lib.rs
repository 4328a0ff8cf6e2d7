//! C ABI over the trained models and a few numeric kernels.
//!
//! Models are opaque handles loaded from checkpoint JSON. Every call returns
//! a [`TbmStatus`]; on failure [`tbm_last_error`] holds a message for the
//! calling thread. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use tbm_core::anomaly::{kl_loss, score_windows, LatentDistribution, VaeModel, Windows};
use tbm_core::checkpoint::{Checkpoint, CheckpointError};
use tbm_core::preprocess::{minmax_normalize, zscore_normalize};
use tbm_core::rate::{predict_rate, smooth_l1_loss, RateModel};
use tbm_core::tensor::Tensor;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    ShapeMismatch = 4,
    ManifestMismatch = 5,
    Internal = 6,
}

/// A loaded rate model.
pub struct TbmRateModel {
    model: RateModel,
}

/// A loaded anomaly model and its calibrated threshold.
pub struct TbmAnomalyModel {
    model: VaeModel,
    threshold: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: TbmStatus, msg: impl ToString) -> TbmStatus {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
    status
}

fn guard(f: impl FnOnce() -> TbmStatus) -> TbmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TbmStatus::Internal, "panic inside tbm"),
    }
}

fn checkpoint_status(e: CheckpointError) -> TbmStatus {
    let status = match e {
        CheckpointError::HashMismatch { .. } => TbmStatus::ManifestMismatch,
        CheckpointError::Kind { .. } => TbmStatus::InvalidArgument,
        _ => TbmStatus::ParseError,
    };
    fail(status, e)
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn input<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if ptr.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(ptr, len))
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn output<'a, T>(ptr: *mut T, len: usize) -> Option<&'a mut [T]> {
    if ptr.is_null() {
        None
    } else {
        Some(slice::from_raw_parts_mut(ptr, len))
    }
}

unsafe fn text<'a>(ptr: *const u8, len: usize) -> Result<&'a str, TbmStatus> {
    let bytes = input(ptr, len).ok_or(TbmStatus::NullPointer)?;
    std::str::from_utf8(bytes).map_err(|e| fail(TbmStatus::ParseError, e))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn tbm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a rate checkpoint from `len` bytes of UTF-8 JSON. When
/// `manifest_hash` is non-null it must match the checkpoint's hash.
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tbm_rate_model_load(
    json: *const u8,
    len: usize,
    manifest_hash: *const u8,
    hash_len: usize,
    out: *mut *mut TbmRateModel,
) -> TbmStatus {
    guard(|| {
        if out.is_null() {
            return fail(TbmStatus::NullPointer, "out is null");
        }
        let ck = match text(json, len).map(Checkpoint::from_json) {
            Ok(Ok(ck)) => ck,
            Ok(Err(e)) => return checkpoint_status(e),
            Err(s) => return s,
        };
        if !manifest_hash.is_null() {
            let hash = match text(manifest_hash, hash_len) {
                Ok(h) => h,
                Err(s) => return s,
            };
            if let Err(e) = ck.verify_manifest(hash) {
                return checkpoint_status(e);
            }
        }
        match ck.to_rate_model() {
            Ok(model) => {
                *out = Box::into_raw(Box::new(TbmRateModel { model }));
                TbmStatus::Ok
            }
            Err(e) => checkpoint_status(e),
        }
    })
}

/// # Safety
/// `model` must come from [`tbm_rate_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tbm_rate_model_free(model: *mut TbmRateModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature count and window length the model expects.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tbm_rate_model_dims(
    model: *const TbmRateModel,
    features: *mut usize,
    window_len: *mut usize,
) -> TbmStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(TbmStatus::NullPointer, "model is null");
        };
        if features.is_null() || window_len.is_null() {
            return fail(TbmStatus::NullPointer, "output is null");
        }
        *features = m.model.input_dim;
        *window_len = m.model.config.window_len;
        TbmStatus::Ok
    })
}

/// Predicts `n` next-step speeds from windows laid out `[n, features, window_len]`.
///
/// # Safety
/// `windows` must hold `n * features * window_len` values and `out` `n`.
#[no_mangle]
pub unsafe extern "C" fn tbm_rate_model_predict(
    model: *const TbmRateModel,
    windows: *const f64,
    n: usize,
    features: usize,
    window_len: usize,
    out: *mut f64,
) -> TbmStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(TbmStatus::NullPointer, "model is null");
        };
        let (Some(x), Some(y)) = (input(windows, n * features * window_len), output(out, n)) else {
            return fail(TbmStatus::NullPointer, "buffer is null");
        };
        if n == 0 {
            return fail(TbmStatus::InvalidArgument, "no windows");
        }
        if window_len != m.model.config.window_len {
            return fail(
                TbmStatus::ShapeMismatch,
                format!("window length {window_len}, model expects {}", m.model.config.window_len),
            );
        }
        let t = match Tensor::from_vec(vec![n, features, window_len], x.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(TbmStatus::ShapeMismatch, e),
        };
        match predict_rate(&m.model, &t) {
            Ok(p) => {
                y.copy_from_slice(&p);
                TbmStatus::Ok
            }
            Err(e) => fail(TbmStatus::ShapeMismatch, e),
        }
    })
}

/// Loads an anomaly checkpoint; see [`tbm_rate_model_load`].
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tbm_anomaly_model_load(
    json: *const u8,
    len: usize,
    manifest_hash: *const u8,
    hash_len: usize,
    out: *mut *mut TbmAnomalyModel,
) -> TbmStatus {
    guard(|| {
        if out.is_null() {
            return fail(TbmStatus::NullPointer, "out is null");
        }
        let ck = match text(json, len).map(Checkpoint::from_json) {
            Ok(Ok(ck)) => ck,
            Ok(Err(e)) => return checkpoint_status(e),
            Err(s) => return s,
        };
        if !manifest_hash.is_null() {
            let hash = match text(manifest_hash, hash_len) {
                Ok(h) => h,
                Err(s) => return s,
            };
            if let Err(e) = ck.verify_manifest(hash) {
                return checkpoint_status(e);
            }
        }
        match ck.to_anomaly_model() {
            Ok((model, threshold)) => {
                *out = Box::into_raw(Box::new(TbmAnomalyModel { model, threshold }));
                TbmStatus::Ok
            }
            Err(e) => checkpoint_status(e),
        }
    })
}

/// # Safety
/// `model` must come from [`tbm_anomaly_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tbm_anomaly_model_free(model: *mut TbmAnomalyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length, excavation and geology channel counts, and threshold.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tbm_anomaly_model_dims(
    model: *const TbmAnomalyModel,
    seq_len: *mut usize,
    d_exc: *mut usize,
    d_geo: *mut usize,
    threshold: *mut f64,
) -> TbmStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(TbmStatus::NullPointer, "model is null");
        };
        if seq_len.is_null() || d_exc.is_null() || d_geo.is_null() || threshold.is_null() {
            return fail(TbmStatus::NullPointer, "output is null");
        }
        *seq_len = m.model.config.seq_len;
        *d_exc = m.model.d_exc;
        *d_geo = m.model.d_geo;
        *threshold = m.threshold;
        TbmStatus::Ok
    })
}

/// Scores `n` windows. `exc` is `[n, seq_len, d_exc]` and `geo`
/// `[n, seq_len, d_geo]`, all in `[0, 1]`. `flags` may be null; otherwise it
/// receives 1 where the score exceeds the threshold.
///
/// # Safety
/// Buffers must hold the sizes above; `scores` and `flags` hold `n`.
#[no_mangle]
pub unsafe extern "C" fn tbm_anomaly_model_score(
    model: *const TbmAnomalyModel,
    exc: *const f64,
    geo: *const f64,
    n: usize,
    scores: *mut f64,
    flags: *mut u8,
) -> TbmStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(TbmStatus::NullPointer, "model is null");
        };
        let seq = m.model.config.seq_len;
        let (Some(e), Some(g), Some(s)) = (
            input(exc, n * seq * m.model.d_exc),
            input(geo, n * seq * m.model.d_geo),
            output(scores, n),
        ) else {
            return fail(TbmStatus::NullPointer, "buffer is null");
        };
        if n == 0 {
            return fail(TbmStatus::InvalidArgument, "no windows");
        }
        let w = match Windows::new(seq, m.model.d_exc, m.model.d_geo, e.to_vec(), g.to_vec(), vec![0; n]) {
            Ok(w) => w,
            Err(e) => return fail(TbmStatus::InvalidArgument, e),
        };
        match score_windows(&m.model, &w) {
            Ok(v) => {
                s.copy_from_slice(&v);
                if let Some(f) = output(flags, n) {
                    for (f, v) in f.iter_mut().zip(&v) {
                        *f = u8::from(*v > m.threshold);
                    }
                }
                TbmStatus::Ok
            }
            Err(e) => fail(TbmStatus::Internal, e),
        }
    })
}

/// Z-score of `n` values with the sample standard deviation. `mean` and
/// `std` may be null.
///
/// # Safety
/// `x` and `out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn tbm_zscore(x: *const f64, n: usize, out: *mut f64, mean: *mut f64, std: *mut f64) -> TbmStatus {
    guard(|| {
        let (Some(x), Some(y)) = (input(x, n), output(out, n)) else {
            return fail(TbmStatus::NullPointer, "buffer is null");
        };
        match zscore_normalize(x) {
            Ok((z, stats)) => {
                y.copy_from_slice(&z);
                if !mean.is_null() {
                    *mean = stats.mean;
                }
                if !std.is_null() {
                    *std = stats.std;
                }
                TbmStatus::Ok
            }
            Err(e) => fail(TbmStatus::InvalidArgument, e),
        }
    })
}

/// Min-max scaling of `n` values into `[0, 1]`.
///
/// # Safety
/// `x` and `out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn tbm_minmax(x: *const f64, n: usize, out: *mut f64) -> TbmStatus {
    guard(|| {
        let (Some(x), Some(y)) = (input(x, n), output(out, n)) else {
            return fail(TbmStatus::NullPointer, "buffer is null");
        };
        match minmax_normalize(x) {
            Ok((v, _)) => {
                y.copy_from_slice(&v);
                TbmStatus::Ok
            }
            Err(e) => fail(TbmStatus::InvalidArgument, e),
        }
    })
}

/// Mean smooth-L1 loss between two length-`n` vectors.
///
/// # Safety
/// `pred` and `target` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tbm_smooth_l1(pred: *const f64, target: *const f64, n: usize, out: *mut f64) -> TbmStatus {
    guard(|| {
        let (Some(p), Some(t)) = (input(pred, n), input(target, n)) else {
            return fail(TbmStatus::NullPointer, "buffer is null");
        };
        if out.is_null() {
            return fail(TbmStatus::NullPointer, "out is null");
        }
        if n == 0 {
            return fail(TbmStatus::InvalidArgument, "empty input");
        }
        let v = |s: &[f64]| Tensor::from_vec(vec![n], s.to_vec()).unwrap();
        match smooth_l1_loss(&v(p), &v(t)) {
            Ok(l) => {
                *out = l;
                TbmStatus::Ok
            }
            Err(e) => fail(TbmStatus::InvalidArgument, e),
        }
    })
}

/// KL divergence of `N(mu, exp(log_var))` from the standard normal, summed
/// over `n` latent dimensions.
///
/// # Safety
/// `mu` and `log_var` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tbm_kl(mu: *const f64, log_var: *const f64, n: usize, out: *mut f64) -> TbmStatus {
    guard(|| {
        let (Some(m), Some(l)) = (input(mu, n), input(log_var, n)) else {
            return fail(TbmStatus::NullPointer, "buffer is null");
        };
        if out.is_null() {
            return fail(TbmStatus::NullPointer, "out is null");
        }
        if n == 0 {
            return fail(TbmStatus::InvalidArgument, "empty input");
        }
        let v = |s: &[f64]| Tensor::from_vec(vec![n], s.to_vec()).unwrap();
        *out = kl_loss(&LatentDistribution {
            mu: v(m),
            log_var: v(l),
        });
        TbmStatus::Ok
    })
}
