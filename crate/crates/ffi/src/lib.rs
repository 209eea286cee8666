//! C ABI over the `medc` library.
//!
//! Every fallible call returns a [`MedcStatus`]. On failure the message is
//! available from [`medc_last_error`] until the next call on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use medc::checkpoint::{Checkpoint, CheckpointMeta};
use medc::data::{read_feature_file, Dataset};
use medc::evaluation::{average_precision, evaluate};
use medc::gradcheck::{check_full_objective, GradCheckShape};
use medc::model::MedcModel;
use medc::{MedcError, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MedcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    ParseError = 4,
    IoError = 5,
    NonFinite = 6,
    CheckpointError = 7,
    ConfigError = 8,
    NoPositives = 9,
    Panic = 10,
}

/// Opaque feature-file contents.
pub struct MedcDataset {
    inner: Dataset,
}

/// Opaque trained model with the label statistics it was trained on.
pub struct MedcModelHandle {
    model: MedcModel,
    meta: CheckpointMeta,
}

/// Headline metrics. Group entries are NaN when the group has no class
/// with a test positive.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MedcMetrics {
    pub overall_map: f64,
    pub head_map: f64,
    pub medium_map: f64,
    pub tail_map: f64,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &MedcError) -> MedcStatus {
    match err {
        MedcError::Shape(_) => MedcStatus::ShapeMismatch,
        MedcError::Invalid(_) | MedcError::EmptyClasses(_) => MedcStatus::InvalidArgument,
        MedcError::NonFinite(_) | MedcError::GradCheck(_) => MedcStatus::NonFinite,
        MedcError::Parse { .. } => MedcStatus::ParseError,
        MedcError::Io { .. } => MedcStatus::IoError,
        MedcError::Checkpoint(_) => MedcStatus::CheckpointError,
        MedcError::Config(_) | MedcError::Json(_) => MedcStatus::ConfigError,
    }
}

/// Runs `f`, recording its error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (MedcStatus, String)>) -> MedcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MedcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MedcStatus::Panic
        }
    }
}

fn lift<T>(r: medc::Result<T>) -> Result<T, (MedcStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MedcStatus, String) {
    (MedcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (MedcStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (MedcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn medc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn medc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a feature file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medc_dataset_read(path: *const c_char, out: *mut *mut MedcDataset) -> MedcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let inner = lift(read_feature_file(&path))?;
        *out = Box::into_raw(Box::new(MedcDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from `medc_dataset_read` or be null.
#[no_mangle]
pub unsafe extern "C" fn medc_dataset_num_records(ds: *const MedcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must come from `medc_dataset_read` or be null.
#[no_mangle]
pub unsafe extern "C" fn medc_dataset_num_classes(ds: *const MedcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.num_classes)
}

/// # Safety
/// `ds` must come from `medc_dataset_read` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn medc_dataset_free(ds: *mut MedcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a model from a checkpoint manifest (the `.bin` payload must sit
/// beside it).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medc_model_load(path: *const c_char, out: *mut *mut MedcModelHandle) -> MedcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let ckpt = lift(Checkpoint::load(&path))?;
        let model = lift(ckpt.model())?;
        *out = Box::into_raw(Box::new(MedcModelHandle { model, meta: ckpt.meta }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from `medc_model_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn medc_model_num_classes(m: *const MedcModelHandle) -> usize {
    m.as_ref().map_or(0, |m| m.model.num_classes)
}

/// # Safety
/// `m` must come from `medc_model_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn medc_model_input_dim(m: *const MedcModelHandle) -> usize {
    m.as_ref().map_or(0, |m| m.model.input_dim)
}

/// Expert-averaged class probabilities for one clip of `frames` × `dim`
/// row-major features. Writes `num_classes` values to `out_probs`.
///
/// # Safety
/// `features` must hold `frames * dim` doubles and `out_probs` must have
/// room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn medc_model_predict(
    m: *const MedcModelHandle,
    features: *const f64,
    frames: usize,
    dim: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> MedcStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        let c = m.model.num_classes;
        if out_len < c {
            return Err((
                MedcStatus::ShapeMismatch,
                format!("output buffer holds {out_len} values, model has C={c}"),
            ));
        }
        let len = frames
            .checked_mul(dim)
            .ok_or_else(|| (MedcStatus::InvalidArgument, "frames * dim overflows".to_string()))?;
        let x = std::slice::from_raw_parts(features, len).to_vec();
        let video = lift(Tensor::new(vec![frames, dim], x))?;
        let probs = lift(m.model.forward_inference(&[&video], None))?;
        std::slice::from_raw_parts_mut(out_probs, c).copy_from_slice(&probs[0]);
        Ok(())
    })
}

/// Evaluates a model on a dataset using the model's training label groups.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medc_model_evaluate(
    m: *const MedcModelHandle,
    ds: *const MedcDataset,
    out: *mut MedcMetrics,
) -> MedcStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = lift(evaluate(&m.model, &ds.inner, &m.meta.label_stats, None))?;
        *out = MedcMetrics {
            overall_map: r.overall_map,
            head_map: r.head_map.unwrap_or(f64::NAN),
            medium_map: r.medium_map.unwrap_or(f64::NAN),
            tail_map: r.tail_map.unwrap_or(f64::NAN),
            acc_at_1: r.acc_at_1,
            acc_at_5: r.acc_at_5,
        };
        Ok(())
    })
}

/// # Safety
/// `m` must come from `medc_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn medc_model_free(m: *mut MedcModelHandle) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Average precision of one class ranking. `positives[i]` is nonzero for
/// a positive sample. Returns `NoPositives` when there is none.
///
/// # Safety
/// `scores` and `positives` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medc_average_precision(
    scores: *const f64,
    positives: *const u8,
    n: usize,
    out: *mut f64,
) -> MedcStatus {
    guard(|| {
        if scores.is_null() || positives.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let p: Vec<bool> = std::slice::from_raw_parts(positives, n).iter().map(|&b| b != 0).collect();
        if s.iter().any(|v| !v.is_finite()) {
            return Err((MedcStatus::NonFinite, "scores contain a non-finite value".into()));
        }
        let ap = average_precision(s, &p).ok_or_else(|| (MedcStatus::NoPositives, "no positive sample".to_string()))?;
        *out = ap;
        Ok(())
    })
}

/// Finite-difference check of the full objective; writes the largest
/// relative error.
///
/// # Safety
/// `out_max_rel_err` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medc_gradcheck(seed: u64, out_max_rel_err: *mut f64) -> MedcStatus {
    guard(|| {
        let out = out_max_rel_err.as_mut().ok_or_else(|| null("out_max_rel_err"))?;
        *out = lift(check_full_objective(seed, GradCheckShape::default()))?.max_rel_err;
        Ok(())
    })
}
