//! C ABI for residual balancing weights and marginal structural models.
//!
//! Conventions:
//! - every fallible function returns an [`RbwStatus`]; results are written
//!   through out-pointers only on success;
//! - objects are opaque handles created by `rbw_*_new`/`rbw_*_load`/
//!   `rbw_*_fit` functions and released with the matching `rbw_*_free`;
//! - on failure a human-readable message is stored per thread and read with
//!   [`rbw_last_error_message`];
//! - panics never cross the boundary and surface as `RBW_STATUS_PANIC`;
//! - matrices are column-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nalgebra::{DMatrix, DVector};
use rbw_core::cli::panel_schema_file;
use rbw_core::data::{load_panel_csv, PanelDataset, PanelParts, VariableKind};
use rbw_core::ebal::{solve_entropy_balance, ConstraintMatrix, EntropyOptions};
use rbw_core::error::Error;
use rbw_core::formula::{parse_contrast, parse_formula};
use rbw_core::glm::Family;
use rbw_core::ipw::{censor_weights, ipw_panel, IpwSpec, WeightVector};
use rbw_core::msm::{effect_summary, fit_msm, ColumnSource, MsmFit};
use rbw_core::rbw::{constraint_counts, rbw_panel, ConfounderModelSpec, HFunctionSpec};
use rbw_core::simulate::{apply_misspecification, generate_sample, SimulationConfig};

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numerical = 5,
    Infeasible = 6,
    NotConverged = 7,
    Formula = 8,
    Panic = 9,
}

/// Regressor sets for the confounder models of [`rbw_weights_rbw`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbwModelSpec {
    /// Previous-period confounders and treatment.
    LagOne = 0,
    /// Previous-period treatment only.
    PriorTreatment = 1,
}

/// Opaque panel dataset.
pub struct RbwPanel {
    data: PanelDataset,
}

/// Opaque weight vector with its diagnostics.
pub struct RbwWeights {
    weights: DVector<f64>,
    max_violation: f64,
}

/// Opaque fitted marginal structural model.
pub struct RbwMsm {
    fit: MsmFit,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let msg = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> RbwStatus {
    match err {
        Error::Io { .. } => RbwStatus::Io,
        Error::Csv(_)
        | Error::Schema(_)
        | Error::Empty(_)
        | Error::DuplicateKey { .. }
        | Error::IncompletePanel { .. }
        | Error::NonNumeric { .. }
        | Error::KindViolation { .. }
        | Error::InvalidData(_)
        | Error::InvalidResponse { .. }
        | Error::Join(_)
        | Error::MissingTruth { .. }
        | Error::Degenerate(_) => RbwStatus::Data,
        Error::RankDeficient(_) | Error::Positivity { .. } | Error::ConfounderModel { .. } => {
            RbwStatus::Numerical
        }
        Error::Infeasible { .. } | Error::EmptyConstraints => RbwStatus::Infeasible,
        Error::NotConverged { .. } | Error::MaxIterations { .. } => RbwStatus::NotConverged,
        Error::Syntax { .. } | Error::UnknownColumn { .. } | Error::DuplicateTerm { .. } => {
            RbwStatus::Formula
        }
        _ => RbwStatus::InvalidArgument,
    }
}

struct Fail(RbwStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RbwStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(RbwStatus::InvalidArgument, msg.into())
}

/// Run `f`, record its error message and translate panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RbwStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RbwStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
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
            RbwStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out<T>(p: *mut T, what: &str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(p)
    }
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rbw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rbw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Panels
// ---------------------------------------------------------------------------

/// Load a long-format panel CSV described by a `key = value` schema file.
///
/// # Safety
/// `data_path` and `schema_path` must be NUL-terminated strings and
/// `out_panel` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rbw_panel_load_csv(
    data_path: *const c_char,
    schema_path: *const c_char,
    out_panel: *mut *mut RbwPanel,
) -> RbwStatus {
    guard(|| {
        let data_path = str_arg(data_path, "data_path")?;
        let schema_path = str_arg(schema_path, "schema_path")?;
        let dst = out(out_panel, "out_panel")?;
        let schema = panel_schema_file(Path::new(schema_path), &[])?;
        let data = load_panel_csv(data_path, &schema)?;
        *dst = Box::into_raw(Box::new(RbwPanel { data }));
        Ok(())
    })
}

/// Build a panel from arrays. `treatments` is n × periods, `confounders`
/// holds `periods` consecutive n × n_confounders blocks, all column-major.
/// `base_weights` may be NULL for unit weights. Treatment columns are named
/// `D1..DT`, confounders `X1..XJ` and the outcome `Y`.
///
/// # Safety
/// Each array must hold the number of elements implied by the dimensions.
#[no_mangle]
pub unsafe extern "C" fn rbw_panel_new(
    n: usize,
    periods: usize,
    n_confounders: usize,
    treatments: *const f64,
    binary_treatment: bool,
    confounders: *const f64,
    outcome: *const f64,
    base_weights: *const f64,
    out_panel: *mut *mut RbwPanel,
) -> RbwStatus {
    guard(|| {
        let dst = out(out_panel, "out_panel")?;
        let d = slice_arg(treatments, n * periods, "treatments")?;
        let x = slice_arg(confounders, n * n_confounders * periods, "confounders")?;
        let y = slice_arg(outcome, n, "outcome")?;
        let q = if base_weights.is_null() {
            vec![1.0; n]
        } else {
            slice_arg(base_weights, n, "base_weights")?.to_vec()
        };
        let block = n * n_confounders;
        let data = PanelDataset::from_parts(PanelParts {
            unit_ids: (1..=n).map(|i| i.to_string()).collect(),
            times: (1..=periods).map(|t| t as f64).collect(),
            baseline_names: vec![],
            baseline: DMatrix::zeros(n, 0),
            confounder_names: (1..=n_confounders).map(|j| format!("X{j}")).collect(),
            confounders: (0..periods)
                .map(|t| DMatrix::from_column_slice(n, n_confounders, &x[t * block..(t + 1) * block]))
                .collect(),
            treatment_name: "D".into(),
            treatment_kind: if binary_treatment {
                VariableKind::Binary
            } else {
                VariableKind::Continuous
            },
            treatments: DMatrix::from_column_slice(n, periods, d),
            outcome_name: "Y".into(),
            outcome: DVector::from_column_slice(y),
            base_weights: DVector::from_vec(q),
            auxiliary: vec![],
        })?;
        *dst = Box::into_raw(Box::new(RbwPanel { data }));
        Ok(())
    })
}

/// Draw one sample from the built-in simulation design (3 periods, 4
/// confounders). Misspecified samples expose transformed confounders.
///
/// # Safety
/// `out_panel` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rbw_panel_simulate(
    n: usize,
    alpha: f64,
    continuous: bool,
    misspecified: bool,
    seed: u64,
    out_panel: *mut *mut RbwPanel,
) -> RbwStatus {
    guard(|| {
        let dst = out(out_panel, "out_panel")?;
        let cfg = SimulationConfig {
            n,
            alpha,
            treatment_kind: if continuous {
                VariableKind::Continuous
            } else {
                VariableKind::Binary
            },
            misspecified,
            seed,
            ..SimulationConfig::default()
        };
        let mut s = generate_sample(&cfg)?;
        if misspecified {
            s = apply_misspecification(&s)?;
        }
        *dst = Box::into_raw(Box::new(RbwPanel { data: s.data }));
        Ok(())
    })
}

/// Number of units, or 0 for NULL.
///
/// # Safety
/// `panel` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rbw_panel_n(panel: *const RbwPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.data.n())
}

/// Number of periods, or 0 for NULL.
///
/// # Safety
/// `panel` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rbw_panel_periods(panel: *const RbwPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.data.periods())
}

/// # Safety
/// `panel` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rbw_panel_free(panel: *mut RbwPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Residual balancing weights with the full treatment horizon. Gaussian
/// confounder models are used when `gaussian` is set, otherwise families
/// follow each confounder's level of measurement.
///
/// # Safety
/// `panel` must be a live handle and `out_weights` writable.
#[no_mangle]
pub unsafe extern "C" fn rbw_weights_rbw(
    panel: *const RbwPanel,
    spec: RbwModelSpec,
    gaussian: bool,
    tol: f64,
    max_iter: usize,
    out_weights: *mut *mut RbwWeights,
) -> RbwStatus {
    guard(|| {
        let p = handle(panel, "panel")?;
        let dst = out(out_weights, "out_weights")?;
        if !(tol > 0.0) || max_iter == 0 {
            return Err(invalid("tol must be positive and max_iter non-zero"));
        }
        let mut s = match spec {
            RbwModelSpec::LagOne => ConfounderModelSpec::lag_one(&p.data),
            RbwModelSpec::PriorTreatment => ConfounderModelSpec::prior_treatment_only(&p.data),
        };
        if gaussian {
            s = s.with_family(Family::Gaussian);
        }
        let opts = EntropyOptions {
            tol,
            max_iter,
            ..EntropyOptions::default()
        };
        let sol = rbw_panel(&p.data, &s, &HFunctionSpec::default(), &opts)?;
        *dst = Box::into_raw(Box::new(RbwWeights {
            max_violation: sol.max_constraint_violation,
            weights: sol.weights,
        }));
        Ok(())
    })
}

/// Inverse probability weights from lag-one treatment models. Weights are
/// censored at the given percentiles when `0 <= lower < upper <= 100`; pass
/// a negative `lower` to skip censoring.
///
/// # Safety
/// `panel` must be a live handle and `out_weights` writable.
#[no_mangle]
pub unsafe extern "C" fn rbw_weights_ipw(
    panel: *const RbwPanel,
    stabilized: bool,
    lower: f64,
    upper: f64,
    out_weights: *mut *mut RbwWeights,
) -> RbwStatus {
    guard(|| {
        let p = handle(panel, "panel")?;
        let dst = out(out_weights, "out_weights")?;
        let mut w: WeightVector = ipw_panel(&p.data, &IpwSpec::lag_one(&p.data, stabilized, false))?;
        if lower >= 0.0 {
            w = censor_weights(&w, lower, upper)?;
        }
        *dst = Box::into_raw(Box::new(RbwWeights {
            weights: w.weights,
            max_violation: f64::NAN,
        }));
        Ok(())
    })
}

/// Number of weights, or 0 for NULL.
///
/// # Safety
/// `weights` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rbw_weights_len(weights: *const RbwWeights) -> usize {
    weights.as_ref().map_or(0, |w| w.weights.len())
}

/// Largest absolute balance violation; NaN for inverse probability weights
/// and for NULL.
///
/// # Safety
/// `weights` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rbw_weights_max_violation(weights: *const RbwWeights) -> f64 {
    weights.as_ref().map_or(f64::NAN, |w| w.max_violation)
}

/// Copy the weights into `buffer`, which must hold exactly
/// [`rbw_weights_len`] values.
///
/// # Safety
/// `weights` must be a live handle and `buffer` writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn rbw_weights_copy(
    weights: *const RbwWeights,
    buffer: *mut f64,
    len: usize,
) -> RbwStatus {
    guard(|| {
        let w = handle(weights, "weights")?;
        let dst = out(buffer, "buffer")?;
        if len != w.weights.len() {
            return Err(invalid(format!(
                "buffer holds {len} values for {} weights",
                w.weights.len()
            )));
        }
        ptr::copy_nonoverlapping(w.weights.as_ptr(), dst, len);
        Ok(())
    })
}

/// # Safety
/// `weights` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rbw_weights_free(weights: *mut RbwWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

// ---------------------------------------------------------------------------
// Marginal structural models
// ---------------------------------------------------------------------------

/// Weighted least squares fit of `formula` (e.g. `Y ~ D1 + D2 + D3` or
/// `Y ~ cum(D)`) with a sandwich covariance.
///
/// # Safety
/// `panel` and `weights` must be live handles, `formula` a NUL-terminated
/// string and `out_msm` writable.
#[no_mangle]
pub unsafe extern "C" fn rbw_msm_fit(
    panel: *const RbwPanel,
    weights: *const RbwWeights,
    formula: *const c_char,
    out_msm: *mut *mut RbwMsm,
) -> RbwStatus {
    guard(|| {
        let p = handle(panel, "panel")?;
        let w = handle(weights, "weights")?;
        let text = str_arg(formula, "formula")?;
        let dst = out(out_msm, "out_msm")?;
        let parsed = parse_formula(text, &p.data.catalog())?;
        let fit = fit_msm(&p.data, &parsed, &w.weights)?;
        let names = fit
            .names
            .iter()
            .map(|n| CString::new(n.as_str()).unwrap_or_default())
            .collect();
        *dst = Box::into_raw(Box::new(RbwMsm { fit, names }));
        Ok(())
    })
}

/// Number of coefficients including the intercept, or 0 for NULL.
///
/// # Safety
/// `msm` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rbw_msm_n_coefficients(msm: *const RbwMsm) -> usize {
    msm.as_ref().map_or(0, |m| m.fit.coefficients.len())
}

/// Name of coefficient `index`, owned by the handle; NULL when out of range.
///
/// # Safety
/// `msm` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rbw_msm_coefficient_name(msm: *const RbwMsm, index: usize) -> *const c_char {
    msm.as_ref()
        .and_then(|m| m.names.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Copy estimates and sandwich standard errors; either buffer may be NULL.
///
/// # Safety
/// `msm` must be a live handle and non-NULL buffers writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn rbw_msm_coefficients(
    msm: *const RbwMsm,
    estimates: *mut f64,
    std_errors: *mut f64,
    len: usize,
) -> RbwStatus {
    guard(|| {
        let m = handle(msm, "msm")?;
        let p = m.fit.coefficients.len();
        if len != p {
            return Err(invalid(format!("buffers hold {len} values for {p} coefficients")));
        }
        if !estimates.is_null() {
            ptr::copy_nonoverlapping(m.fit.coefficients.as_ptr(), estimates, p);
        }
        if !std_errors.is_null() {
            let se = m.fit.standard_errors();
            ptr::copy_nonoverlapping(se.as_ptr(), std_errors, p);
        }
        Ok(())
    })
}

/// Linear combination such as `10*b1+10*b2` (b0 is the intercept) with its
/// sandwich standard error.
///
/// # Safety
/// `msm` must be a live handle, `contrast` a NUL-terminated string and
/// `estimate`/`std_error` writable.
#[no_mangle]
pub unsafe extern "C" fn rbw_msm_contrast(
    msm: *const RbwMsm,
    contrast: *const c_char,
    estimate: *mut f64,
    std_error: *mut f64,
) -> RbwStatus {
    guard(|| {
        let m = handle(msm, "msm")?;
        let text = str_arg(contrast, "contrast")?;
        let est = out(estimate, "estimate")?;
        let se = out(std_error, "std_error")?;
        let c = parse_contrast(text, m.fit.coefficients.len())?;
        let e = effect_summary(&m.fit, &c)?;
        *est = e.estimate;
        *se = e.se;
        Ok(())
    })
}

/// # Safety
/// `msm` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rbw_msm_free(msm: *mut RbwMsm) {
    if !msm.is_null() {
        drop(Box::from_raw(msm));
    }
}

// ---------------------------------------------------------------------------
// Array-level helpers
// ---------------------------------------------------------------------------

/// Minimum relative-entropy weights for an n × m column-major constraint
/// matrix. `base_weights` may be NULL for unit weights; `dual` and
/// `max_violation` may be NULL.
///
/// # Safety
/// `constraints` must hold n·m values, `weights` must be writable for n
/// values and non-NULL `dual` writable for m values.
#[no_mangle]
pub unsafe extern "C" fn rbw_entropy_balance(
    n: usize,
    m: usize,
    constraints: *const f64,
    base_weights: *const f64,
    tol: f64,
    max_iter: usize,
    weights: *mut f64,
    dual: *mut f64,
    max_violation: *mut f64,
) -> RbwStatus {
    guard(|| {
        let c = slice_arg(constraints, n * m, "constraints")?;
        let w_out = out(weights, "weights")?;
        let q = if base_weights.is_null() {
            DVector::from_element(n, 1.0)
        } else {
            DVector::from_column_slice(slice_arg(base_weights, n, "base_weights")?)
        };
        let cm = ConstraintMatrix::from_columns(DMatrix::from_column_slice(n, m, c))?;
        let opts = EntropyOptions {
            tol,
            max_iter,
            ..EntropyOptions::default()
        };
        let sol = solve_entropy_balance(&cm, &q, &opts)?;
        ptr::copy_nonoverlapping(sol.weights.as_ptr(), w_out, n);
        if !dual.is_null() {
            ptr::copy_nonoverlapping(sol.dual.as_ptr(), dual, m);
        }
        if let Some(v) = max_violation.as_mut() {
            *v = sol.max_constraint_violation;
        }
        Ok(())
    })
}

/// Balancing-condition counts for `n_confounders` confounders over
/// `periods` periods with `regressors[t]` regressors, intercept included, in the
/// period-t confounder models and the full treatment horizon.
///
/// # Safety
/// `regressors` must hold `periods` values; `n_c` and `n_c_cbps` writable.
#[no_mangle]
pub unsafe extern "C" fn rbw_constraint_counts(
    n_confounders: usize,
    periods: usize,
    regressors: *const usize,
    n_c: *mut usize,
    n_c_cbps: *mut usize,
) -> RbwStatus {
    guard(|| {
        let l = slice_arg(regressors, periods, "regressors")?;
        let a = out(n_c, "n_c")?;
        let b = out(n_c_cbps, "n_c_cbps")?;
        let (x, y) = constraint_counts(n_confounders, periods, l, None)?;
        *a = x;
        *b = y;
        Ok(())
    })
}
