//! C ABI for the on-device side of tinyreach: feature extraction, forest
//! classification, anomaly scoring, reservoir sampling and firmware
//! verification.
//!
//! Handles are opaque and owned by the caller once created; free them with
//! the matching `*_free`. Every fallible call returns a [`TrStatus`] and, on
//! failure, leaves a message for [`tr_last_error_message`] on the calling
//! thread. Strings returned by the library are NUL-terminated and owned by
//! it.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use tinyreach::ml::{extract_features, model_blob_decode, MlError, Pipeline, Reservoir, SampleWindow, FEATURES};
use tinyreach::sim::FirmwareImage;

/// Number of features written by [`tr_extract_features`].
pub const TR_FEATURES: usize = 12;
const _: () = assert!(TR_FEATURES == FEATURES);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Corrupt = 3,
    NotReady = 4,
    Panic = 5,
}

/// Result of one window.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TrInference {
    pub class_index: u32,
    pub n_classes: u32,
    /// Distance to the nearest k-means centroid.
    pub score: f64,
    pub threshold: f64,
    pub anomalous: bool,
}

/// A decoded model with its inference state.
pub struct TrModel {
    pipeline: Pipeline,
    name: CString,
    version: CString,
    class_names: Vec<CString>,
}

/// Uniform sample of fixed-width rows of doubles.
pub struct TrReservoir {
    inner: Reservoir<Vec<f64>>,
    width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TrStatus, msg: impl Into<String>) -> TrStatus {
    set_error(msg);
    status
}

fn ml_status(e: &MlError) -> TrStatus {
    match e {
        MlError::BadMagic
        | MlError::UnsupportedVersion(_)
        | MlError::Truncated(_)
        | MlError::MissingSection(_)
        | MlError::Corrupt(_) => TrStatus::Corrupt,
        MlError::ReservoirNotFull { .. } => TrStatus::NotReady,
        _ => TrStatus::InvalidArgument,
    }
}

fn guarded(f: impl FnOnce() -> TrStatus) -> TrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TrStatus::Panic, "internal error"),
    }
}

fn cstring(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).unwrap_or_default()
}

/// # Safety
/// `samples` must point to `3 * n_samples` readable doubles.
unsafe fn window(samples: *const f64, n_samples: usize, rate_hz: u16) -> Result<SampleWindow, TrStatus> {
    if samples.is_null() {
        return Err(fail(TrStatus::NullPointer, "samples is null"));
    }
    if n_samples == 0 {
        return Err(fail(TrStatus::InvalidArgument, "empty window"));
    }
    let flat = slice::from_raw_parts(samples, n_samples * 3);
    Ok(SampleWindow {
        samples: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        rate_hz,
    })
}

/// Library version, e.g. "0.1.0".
#[no_mangle]
pub extern "C" fn tr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Whether `bytes` hold a firmware image whose digest matches.
///
/// # Safety
/// `bytes` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn tr_firmware_verify(bytes: *const u8, len: usize) -> bool {
    if bytes.is_null() {
        return false;
    }
    catch_unwind(|| FirmwareImage::parse(slice::from_raw_parts(bytes, len)).is_ok()).unwrap_or(false)
}

/// Per-axis min, max, RMS and mean crossings of a window of interleaved
/// x, y, z samples. Writes [`TR_FEATURES`] doubles to `out`.
///
/// # Safety
/// `samples` must point to `3 * n_samples` doubles and `out` to
/// `TR_FEATURES` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tr_extract_features(
    samples: *const f64,
    n_samples: usize,
    rate_hz: u16,
    out: *mut f64,
) -> TrStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TrStatus::NullPointer, "out is null");
        }
        let w = match window(samples, n_samples, rate_hz) {
            Ok(w) => w,
            Err(s) => return s,
        };
        match extract_features(&w) {
            Ok(f) => {
                slice::from_raw_parts_mut(out, TR_FEATURES).copy_from_slice(&f);
                TrStatus::Ok
            }
            Err(e) => fail(ml_status(&e), e.to_string()),
        }
    })
}

fn load(blob: &[u8], seed: u64) -> Result<Box<TrModel>, TrStatus> {
    let bundle = model_blob_decode(blob).map_err(|e| fail(ml_status(&e), e.to_string()))?;
    Ok(Box::new(TrModel {
        name: cstring(&bundle.config.name),
        version: cstring(&bundle.config.version),
        class_names: bundle.config.class_names.iter().map(|s| cstring(s)).collect(),
        pipeline: Pipeline::new(bundle, seed),
    }))
}

/// Decode a model blob. `seed` drives the sampling of retraining data.
///
/// # Safety
/// `blob` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tr_model_load(blob: *const u8, len: usize, seed: u64, out: *mut *mut TrModel) -> TrStatus {
    guarded(|| {
        if blob.is_null() || out.is_null() {
            return fail(TrStatus::NullPointer, "blob or out is null");
        }
        match load(slice::from_raw_parts(blob, len), seed) {
            Ok(m) => {
                *out = Box::into_raw(m);
                TrStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Load the model carried by a verified firmware image.
///
/// # Safety
/// As for [`tr_model_load`].
#[no_mangle]
pub unsafe extern "C" fn tr_model_load_firmware(
    image: *const u8,
    len: usize,
    seed: u64,
    out: *mut *mut TrModel,
) -> TrStatus {
    guarded(|| {
        if image.is_null() || out.is_null() {
            return fail(TrStatus::NullPointer, "image or out is null");
        }
        let fw = match FirmwareImage::parse(slice::from_raw_parts(image, len)) {
            Ok((fw, _)) => fw,
            Err(e) => return fail(TrStatus::Corrupt, e.to_string()),
        };
        match load(&fw.model_blob, seed) {
            Ok(m) => {
                *out = Box::into_raw(m);
                TrStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// # Safety
/// `model` must come from a `tr_model_load*` call and not be used again.
#[no_mangle]
pub unsafe extern "C" fn tr_model_free(model: *mut TrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model name, or NULL for a null handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_model_name(model: *const TrModel) -> *const c_char {
    model.as_ref().map_or(ptr::null(), |m| m.name.as_ptr())
}

/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_model_version(model: *const TrModel) -> *const c_char {
    model.as_ref().map_or(ptr::null(), |m| m.version.as_ptr())
}

/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_model_class_count(model: *const TrModel) -> usize {
    model.as_ref().map_or(0, |m| m.class_names.len())
}

/// Name of class `index`, or NULL when out of range.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_model_class_name(model: *const TrModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.class_names.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Anomaly threshold of the current k-means model.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_model_threshold(model: *const TrModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.pipeline.bundle.kmeans.threshold)
}

/// Classify and score one window of interleaved x, y, z samples. Class
/// probabilities go to `probabilities` (up to `capacity` of them; it may be
/// NULL when `capacity` is 0). The scaled features join the retraining
/// sample.
///
/// # Safety
/// `model` must be a live handle; `samples` must point to `3 * n_samples`
/// doubles; `probabilities` to `capacity` writable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tr_model_process(
    model: *mut TrModel,
    samples: *const f64,
    n_samples: usize,
    rate_hz: u16,
    probabilities: *mut f64,
    capacity: usize,
    out: *mut TrInference,
) -> TrStatus {
    guarded(|| {
        let Some(m) = model.as_mut() else {
            return fail(TrStatus::NullPointer, "model is null");
        };
        if out.is_null() || (probabilities.is_null() && capacity > 0) {
            return fail(TrStatus::NullPointer, "out or probabilities is null");
        }
        let w = match window(samples, n_samples, rate_hz) {
            Ok(w) => w,
            Err(s) => return s,
        };
        let inf = match m.pipeline.process(&w) {
            Ok(i) => i,
            Err(e) => return fail(ml_status(&e), e.to_string()),
        };
        let n = inf.probabilities.len().min(capacity);
        if n > 0 {
            slice::from_raw_parts_mut(probabilities, n).copy_from_slice(&inf.probabilities[..n]);
        }
        let threshold = m.pipeline.bundle.kmeans.threshold;
        *out = TrInference {
            class_index: inf.class as u32,
            n_classes: inf.probabilities.len() as u32,
            score: inf.score,
            threshold,
            anomalous: inf.score > threshold,
        };
        TrStatus::Ok
    })
}

/// Retrain the anomaly detector from the windows seen so far. Returns
/// `NotReady` until enough windows have been processed.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_model_retrain(model: *mut TrModel) -> TrStatus {
    guarded(|| {
        let Some(m) = model.as_mut() else {
            return fail(TrStatus::NullPointer, "model is null");
        };
        match m.pipeline.retrain() {
            Ok(_) => TrStatus::Ok,
            Err(e) => fail(ml_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tr_reservoir_new(capacity: usize, width: usize, seed: u64, out: *mut *mut TrReservoir) -> TrStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TrStatus::NullPointer, "out is null");
        }
        if capacity == 0 || width == 0 {
            return fail(TrStatus::InvalidArgument, "capacity and width must be positive");
        }
        *out = Box::into_raw(Box::new(TrReservoir {
            inner: Reservoir::new(capacity, seed),
            width,
        }));
        TrStatus::Ok
    })
}

/// # Safety
/// `reservoir` must come from [`tr_reservoir_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn tr_reservoir_free(reservoir: *mut TrReservoir) {
    if !reservoir.is_null() {
        drop(Box::from_raw(reservoir));
    }
}

/// Offer one row. `slot` receives the index it was stored at, or -1 when
/// it was not kept; it may be NULL.
///
/// # Safety
/// `reservoir` must be live; `row` must point to `width` doubles.
#[no_mangle]
pub unsafe extern "C" fn tr_reservoir_add(reservoir: *mut TrReservoir, row: *const f64, slot: *mut i64) -> TrStatus {
    guarded(|| {
        let Some(r) = reservoir.as_mut() else {
            return fail(TrStatus::NullPointer, "reservoir is null");
        };
        if row.is_null() {
            return fail(TrStatus::NullPointer, "row is null");
        }
        let kept = r.inner.add(slice::from_raw_parts(row, r.width).to_vec());
        if let Some(slot) = slot.as_mut() {
            *slot = kept.map_or(-1, |i| i as i64);
        }
        TrStatus::Ok
    })
}

/// Rows currently held.
///
/// # Safety
/// `reservoir` must be live or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_reservoir_len(reservoir: *const TrReservoir) -> usize {
    reservoir.as_ref().map_or(0, |r| r.inner.items().len())
}

/// Rows offered so far.
///
/// # Safety
/// `reservoir` must be live or NULL.
#[no_mangle]
pub unsafe extern "C" fn tr_reservoir_seen(reservoir: *const TrReservoir) -> u64 {
    reservoir.as_ref().map_or(0, |r| r.inner.seen())
}

/// Copy row `index` to `out`.
///
/// # Safety
/// `reservoir` must be live; `out` must point to `width` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tr_reservoir_get(reservoir: *const TrReservoir, index: usize, out: *mut f64) -> TrStatus {
    guarded(|| {
        let Some(r) = reservoir.as_ref() else {
            return fail(TrStatus::NullPointer, "reservoir is null");
        };
        if out.is_null() {
            return fail(TrStatus::NullPointer, "out is null");
        }
        match r.inner.items().get(index) {
            Some(row) => {
                slice::from_raw_parts_mut(out, r.width).copy_from_slice(row);
                TrStatus::Ok
            }
            None => fail(TrStatus::InvalidArgument, format!("index {index} out of range")),
        }
    })
}
