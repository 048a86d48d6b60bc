//! C ABI over `hte_lab`.
//!
//! Datasets and models are opaque handles owned by the caller and released
//! with the matching `*_free`. Every fallible call returns an [`HteStatus`];
//! on failure the message is kept per thread and read back with
//! [`hte_last_error_message`]. Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hte_lab::data::{validate_dataset, Dataset, EffectModel, Matrix};
use hte_lab::error::HteError;
use hte_lab::persist::{ModelDocument, RunConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HteStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidData = 3,
    FitFailed = 4,
    Io = 5,
    Format = 6,
    NoMeans = 7,
    Panic = 8,
}

/// Opaque dataset handle.
pub struct HteDataset {
    inner: Dataset,
}

/// Opaque fitted model handle.
pub struct HteModel {
    doc: ModelDocument,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &HteError) -> HteStatus {
    use HteError::*;
    match e {
        Io(_) => HteStatus::Io,
        VersionMismatch { .. } | MalformedDocument(_) | Parse { .. } | UnknownMethod(_) => HteStatus::Format,
        InvalidParameter(_) | Unsupported(_) => HteStatus::InvalidArgument,
        DimensionMismatch(_)
        | NonFiniteValue { .. }
        | InvalidTreatment { .. }
        | DegenerateArm { .. }
        | LengthMismatch { .. }
        | MissingColumn(_)
        | EmptyInput(_)
        | PTooSmall { .. } => HteStatus::InvalidData,
        _ => HteStatus::FitFailed,
    }
}

fn guard<F: FnOnce() -> Result<(), (HteStatus, String)>>(f: F) -> HteStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HteStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            HteStatus::Panic
        }
    }
}

fn lib_err(e: HteError) -> (HteStatus, String) {
    (status_of(&e), format!("{}: {e}", e.kind()))
}

fn null(what: &str) -> (HteStatus, String) {
    (HteStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (HteStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (HteStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn features<'a>(x: *const f64, n_rows: usize, n_cols: usize) -> Result<&'a [f64], (HteStatus, String)> {
    let len = n_rows
        .checked_mul(n_cols)
        .ok_or((HteStatus::InvalidArgument, "n_rows * n_cols overflows".to_string()))?;
    if len == 0 {
        return Ok(&[]);
    }
    if x.is_null() {
        return Err(null("x"));
    }
    Ok(std::slice::from_raw_parts(x, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hte_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn hte_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copy `x` (n×p, row-major), `t` (0/1) and `y` into a new dataset. Both
/// arms must be present.
///
/// # Safety
/// `x` must point to `n*p` doubles, `t` and `y` to `n` elements each.
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hte_dataset_new(
    x: *const f64,
    t: *const u8,
    y: *const f64,
    n: usize,
    p: usize,
    out: *mut *mut HteDataset,
) -> HteStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if n > 0 && (t.is_null() || y.is_null()) {
            return Err(null("t or y"));
        }
        let xs = features(x, n, p)?;
        let (t, y) = if n == 0 {
            (Vec::new(), Vec::new())
        } else {
            (std::slice::from_raw_parts(t, n).to_vec(), std::slice::from_raw_parts(y, n).to_vec())
        };
        let m = Matrix::new(n, p, xs.to_vec()).map_err(lib_err)?;
        let d = Dataset::new(m, t, y).map_err(lib_err)?;
        validate_dataset(&d).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HteDataset { inner: d }));
        Ok(())
    })
}

/// # Safety
/// `d` must come from [`hte_dataset_new`] and not be freed twice. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn hte_dataset_free(d: *mut HteDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `d` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn hte_dataset_n_rows(d: *const HteDataset) -> usize {
    d.as_ref().map_or(0, |d| d.inner.n())
}

/// Fit a model described by a run configuration JSON document, e.g.
/// `{"method":"causal_boost","adjustment":"none","seed":7}`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `d` a live dataset handle
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hte_model_fit(
    config_json: *const c_char,
    d: *const HteDataset,
    out: *mut *mut HteModel,
) -> HteStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = RunConfig::from_json(str_arg(config_json, "config_json")?).map_err(lib_err)?;
        let d = d.as_ref().ok_or_else(|| null("dataset"))?;
        let (doc, _) = cfg.fit(&d.inner).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HteModel { doc }));
        Ok(())
    })
}

/// Restore a model from its JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hte_model_from_json(json: *const c_char, out: *mut *mut HteModel) -> HteStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let doc = ModelDocument::from_json(str_arg(json, "json")?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HteModel { doc }));
        Ok(())
    })
}

/// Serialize a model. The string is released with [`hte_string_free`].
///
/// # Safety
/// `m` must be a live model handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hte_model_to_json(m: *const HteModel, out: *mut *mut c_char) -> HteStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let s = m.doc.to_json().map_err(lib_err)?;
        *out = CString::new(s)
            .map_err(|_| (HteStatus::Format, "document contains NUL".to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`hte_model_to_json`]. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn hte_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Number of features the model expects, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn hte_model_n_features(m: *const HteModel) -> usize {
    m.as_ref().map_or(0, |m| m.doc.n_features)
}

unsafe fn check_rows<'a>(
    m: *const HteModel,
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
) -> Result<(&'a HteModel, &'a [f64]), (HteStatus, String)> {
    let m = m.as_ref().ok_or_else(|| null("model"))?;
    if n_cols != m.doc.n_features {
        return Err((
            HteStatus::InvalidData,
            format!("model expects {} features, got {n_cols}", m.doc.n_features),
        ));
    }
    Ok((m, features(x, n_rows, n_cols)?))
}

/// Write τ̂ for each of `n_rows` rows of `x` into `tau_out`.
///
/// # Safety
/// `x` must point to `n_rows*n_cols` doubles and `tau_out` to `n_rows`.
#[no_mangle]
pub unsafe extern "C" fn hte_model_predict_effect(
    m: *const HteModel,
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
    tau_out: *mut f64,
) -> HteStatus {
    guard(|| {
        let (m, xs) = check_rows(m, x, n_rows, n_cols)?;
        if n_rows == 0 {
            return Ok(());
        }
        if tau_out.is_null() {
            return Err(null("tau_out"));
        }
        let out = std::slice::from_raw_parts_mut(tau_out, n_rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = m.doc.model.predict_effect(&xs[i * n_cols..(i + 1) * n_cols]);
        }
        Ok(())
    })
}

/// Write μ̂₁ and μ̂₀ per row. Returns [`HteStatus::NoMeans`] for models
/// that estimate only the effect.
///
/// # Safety
/// `x` must point to `n_rows*n_cols` doubles, `mu1_out` and `mu0_out` to `n_rows` each.
#[no_mangle]
pub unsafe extern "C" fn hte_model_predict_means(
    m: *const HteModel,
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
    mu1_out: *mut f64,
    mu0_out: *mut f64,
) -> HteStatus {
    guard(|| {
        let (m, xs) = check_rows(m, x, n_rows, n_cols)?;
        let probe = vec![0.0; n_cols];
        if m.doc.model.predict_means(&probe).is_none() {
            return Err((HteStatus::NoMeans, "model has no arm-mean readout".into()));
        }
        if n_rows == 0 {
            return Ok(());
        }
        if mu1_out.is_null() || mu0_out.is_null() {
            return Err(null("mu1_out or mu0_out"));
        }
        let mu1 = std::slice::from_raw_parts_mut(mu1_out, n_rows);
        let mu0 = std::slice::from_raw_parts_mut(mu0_out, n_rows);
        for i in 0..n_rows {
            let (a, b) = m.doc.model.predict_means(&xs[i * n_cols..(i + 1) * n_cols]).expect("checked above");
            mu1[i] = a;
            mu0[i] = b;
        }
        Ok(())
    })
}

/// # Safety
/// `m` must come from a fit or load call and not be freed twice. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn hte_model_free(m: *mut HteModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
