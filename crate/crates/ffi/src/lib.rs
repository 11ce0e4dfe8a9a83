//! C interface for loading checkpoints, running inference and evaluating.
//!
//! Every fallible call returns a [`UnifaiStatus`]; on failure the message is
//! available from [`unifai_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use unifai::datasets::{read_cache, LabeledDataset};
use unifai::evaluation::{evaluate, ProbeConfig, RunInfo};
use unifai::model::{load_checkpoint, UnifAIModel, Variant};
use unifai::nn::Tensor;
use unifai::training::LossWeights;
use unifai::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnifaiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Numerical = 6,
    Unsupported = 7,
    Internal = 8,
}

impl From<&Error> for UnifaiStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => UnifaiStatus::Io,
            Error::Parse { .. }
            | Error::Format { .. }
            | Error::ManifestParse { .. }
            | Error::ShapeMismatch { .. }
            | Error::TruncatedBlob { .. } => UnifaiStatus::Format,
            Error::Dimension { .. } => UnifaiStatus::Dimension,
            Error::NumericalFailure(_) => UnifaiStatus::Numerical,
            Error::UnsupportedVariant { .. } => UnifaiStatus::Unsupported,
            Error::Parameter(_) | Error::Config(_) | Error::SpecValidation(_) | Error::DegenerateLabels => {
                UnifaiStatus::InvalidArgument
            }
            Error::Index { .. } | Error::Contract(_) => UnifaiStatus::Internal,
        }
    }
}

/// Loaded model.
pub struct UnifaiModel(UnifAIModel);

/// Loaded dataset cache.
pub struct UnifaiDataset(LabeledDataset);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnifaiModelInfo {
    pub input_dim: usize,
    pub e1_dim: usize,
    pub e2_dim: usize,
    pub num_classes: usize,
    pub num_z_classes: usize,
    /// 0 full, 1 without z-discriminator, 2 no adversaries, 3 encoder and predictor only.
    pub variant: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnifaiProbeConfig {
    pub hidden_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnifaiMetrics {
    pub a_y: f64,
    /// Probe fields are meaningful only when `has_z` is 1.
    pub has_z: u8,
    pub a_z_e1: f64,
    pub a_z_e2: f64,
    pub z_majority_share: f64,
    pub n_eval: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(UnifaiStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(UnifaiStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(UnifaiStatus::NullPointer, format!("`{what}` is null"))
}

fn guarded(body: impl FnOnce() -> Result<(), Fail>) -> UnifaiStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => UnifaiStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            UnifaiStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(UnifaiStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix_arg(x: *const f64, rows: usize, cols: usize, expected_cols: usize) -> Result<Tensor, Fail> {
    if x.is_null() {
        return Err(null("x"));
    }
    if rows == 0 {
        return Err(Fail(UnifaiStatus::InvalidArgument, "rows must be >= 1".into()));
    }
    if cols != expected_cols {
        return Err(Fail(
            UnifaiStatus::Dimension,
            format!("input has {cols} columns, model expects {expected_cols}"),
        ));
    }
    let data = std::slice::from_raw_parts(x, rows * cols).to_vec();
    Ok(Tensor::matrix(rows, cols, data)?)
}

unsafe fn write_out(t: &Tensor, out: *mut f64, out_len: usize, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    if out_len < t.len() {
        return Err(Fail(
            UnifaiStatus::InvalidArgument,
            format!("`{what}` holds {out_len} values, {} needed", t.len()),
        ));
    }
    ptr::copy_nonoverlapping(t.data().as_ptr(), out, t.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unifai_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null.
#[no_mangle]
pub extern "C" fn unifai_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint bundle (stem, `.manifest` or `.bin` path).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unifai_model_load(path: *const c_char, out: *mut *mut UnifaiModel) -> UnifaiStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = load_checkpoint(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(UnifaiModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`unifai_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn unifai_model_free(model: *mut UnifaiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn unifai_model_info(model: *const UnifaiModel, out: *mut UnifaiModelInfo) -> UnifaiStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = m.0.spec();
        *out = UnifaiModelInfo {
            input_dim: s.input_dim,
            e1_dim: s.e1_dim,
            e2_dim: s.e2_dim,
            num_classes: s.num_classes,
            num_z_classes: s.num_z_classes,
            variant: match s.variant {
                Variant::Full => 0,
                Variant::NoDz => 1,
                Variant::B1 => 2,
                Variant::B0 => 3,
            },
        };
        Ok(())
    })
}

/// Class probabilities for `rows` row-major inputs of width `cols`;
/// writes `rows × num_classes` values to `out`.
///
/// # Safety
/// `x` must hold `rows * cols` values and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn unifai_model_predict(
    model: *const UnifaiModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> UnifaiStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = matrix_arg(x, rows, cols, m.0.spec().input_dim)?;
        write_out(&m.0.predict(&x)?, out, out_len, "out")
    })
}

/// Writes `rows × e1_dim` and `rows × e2_dim` embeddings.
///
/// # Safety
/// `x` must hold `rows * cols` values; `e1`/`e2` at least `e1_len`/`e2_len`.
#[no_mangle]
pub unsafe extern "C" fn unifai_model_encode(
    model: *const UnifaiModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    e1: *mut f64,
    e1_len: usize,
    e2: *mut f64,
    e2_len: usize,
) -> UnifaiStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = matrix_arg(x, rows, cols, m.0.spec().input_dim)?;
        let (a, b) = m.0.encode(&x)?;
        write_out(&a, e1, e1_len, "e1")?;
        write_out(&b, e2, e2_len, "e2")
    })
}

/// Loads a dataset cache manifest.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unifai_dataset_load(path: *const c_char, out: *mut *mut UnifaiDataset) -> UnifaiStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let d = read_cache(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(UnifaiDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`unifai_dataset_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn unifai_dataset_free(dataset: *mut UnifaiDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifai_dataset_len(dataset: *const UnifaiDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Probe settings used when `unifai_evaluate` receives a null config.
#[no_mangle]
pub extern "C" fn unifai_probe_config_default() -> UnifaiProbeConfig {
    let p = ProbeConfig::default();
    UnifaiProbeConfig {
        hidden_width: p.hidden_width,
        epochs: p.epochs,
        batch_size: p.batch_size,
        learning_rate: p.learning_rate,
        train_fraction: p.train_fraction,
        seed: p.seed,
    }
}

/// `A_y` and, when the dataset carries z, probe accuracies on both embeddings.
///
/// # Safety
/// `model`, `dataset` and `out` must be valid; `probe` may be null.
#[no_mangle]
pub unsafe extern "C" fn unifai_evaluate(
    model: *const UnifaiModel,
    dataset: *const UnifaiDataset,
    probe: *const UnifaiProbeConfig,
    out: *mut UnifaiMetrics,
) -> UnifaiStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = probe.as_ref().copied().unwrap_or_else(|| unifai_probe_config_default());
        let config = ProbeConfig {
            hidden_width: p.hidden_width,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            train_fraction: p.train_fraction,
            seed: p.seed,
        };
        let info = RunInfo {
            seed: 0,
            weights: LossWeights::default().for_variant(m.0.variant()),
            fingerprint: String::new(),
        };
        let r = evaluate(&m.0, &d.0, &config, &info)?;
        *out = UnifaiMetrics {
            a_y: r.a_y,
            has_z: u8::from(r.a_z_e1.is_some()),
            a_z_e1: r.a_z_e1.unwrap_or(0.0),
            a_z_e2: r.a_z_e2.unwrap_or(0.0),
            z_majority_share: r.z_majority_share.unwrap_or(0.0),
            n_eval: r.n_eval,
        };
        Ok(())
    })
}
