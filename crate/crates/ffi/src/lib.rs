//! C ABI over `hjsafe`: scenarios, solves, value fields and the safety filter.
//!
//! Every function returns an [`HjsafeStatus`]; on failure the message is
//! available from [`hjsafe_last_error`] on the same thread. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hjsafe::grid::ScalarField;
use hjsafe::hjvf;
use hjsafe::safety::{FilterConfig, SafetyFilter};
use hjsafe::sim::{build_grid, prior_bounds, Scenario, SimError};
use hjsafe::solver::{solve, solve_coarse_to_fine};
use hjsafe::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HjsafeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    Panic = 6,
}

/// A scenario (models, grids, constraint, solver settings).
pub struct HjsafeScenario(Scenario);

/// A value function sampled on a grid.
pub struct HjsafeField(ScalarField);

/// Least-restrictive safety filter for one subsystem.
pub struct HjsafeFilter(SafetyFilter);

/// Summary of one solve.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HjsafeSolveInfo {
    pub iterations: usize,
    /// Zero when no coarse stage ran.
    pub coarse_iterations: usize,
    pub converged: bool,
    pub dt: f64,
    pub wall_seconds: f64,
    /// Nodes with `V <= 0`.
    pub safe_nodes: usize,
}

/// Result of filtering one control.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HjsafeDecision {
    pub overridden: bool,
    pub value: f64,
    pub out_of_domain: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(HjsafeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Json(_) | Error::Sim(SimError::Config(_)) => HjsafeStatus::InvalidArgument,
            Error::Io(_) => HjsafeStatus::Io,
            Error::Format(_) => HjsafeStatus::Format,
            _ => HjsafeStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

macro_rules! from_lib_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

from_lib_error!(
    hjsafe::hjvf::FormatError,
    hjsafe::grid::GridError,
    hjsafe::solver::SolverError,
    hjsafe::safety::SafetyError,
    SimError,
    serde_json::Error
);

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HjsafeStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HjsafeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HjsafeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HjsafeStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure(HjsafeStatus::NullPointer, "null handle".into()))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure(HjsafeStatus::NullPointer, "null output pointer".into()))
}

unsafe fn string(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure(HjsafeStatus::NullPointer, "null string".into()));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| invalid("string is not UTF-8"))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(HjsafeStatus::NullPointer, "null array".into()));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn subsystem(s: &Scenario, index: usize) -> Result<&hjsafe::sim::SubsystemSpec, Failure> {
    s.subsystems.get(index).ok_or_else(|| invalid(format!("subsystem {index} out of range ({} available)", s.subsystems.len())))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn hjsafe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a built-in scenario (`quad2d_demo` or `near_hover_demo`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_scenario_preset(name: *const c_char, out: *mut *mut HjsafeScenario) -> HjsafeStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let s = hjsafe::cli::preset(&string(name)?)?;
        s.validate()?;
        *out = Box::into_raw(Box::new(HjsafeScenario(s)));
        Ok(())
    })
}

/// Parses a scenario from JSON (unknown keys are rejected).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_scenario_from_json(json: *const c_char, out: *mut *mut HjsafeScenario) -> HjsafeStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let s: Scenario = serde_json::from_str(&string(json)?)?;
        s.validate()?;
        *out = Box::into_raw(Box::new(HjsafeScenario(s)));
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_scenario_free(scenario: *mut HjsafeScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Number of subsystems, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_scenario_subsystem_count(scenario: *const HjsafeScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.0.subsystems.len())
}

/// Solves subsystem `index` against its prior disturbance bounds
/// (coarse-to-fine when the scenario lists a coarse grid).
///
/// # Safety
/// Handles must be valid; `out_field` and `info` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_solve(
    scenario: *const HjsafeScenario,
    index: usize,
    out_field: *mut *mut HjsafeField,
    info: *mut HjsafeSolveInfo,
) -> HjsafeStatus {
    guard(|| {
        let s = &borrow(scenario)?.0;
        let (out_field, info) = (out_ptr(out_field)?, out_ptr(info)?);
        let spec = subsystem(s, index)?;
        let model = spec.model.build()?;
        let grid = build_grid(&spec.grid)?;
        let c = s.constraint.field(&grid, &spec.state_indices)?;
        let d = prior_bounds(spec, &s.gp, &grid)?;
        let (res, coarse) = match &spec.coarse {
            Some(n) => {
                let r = solve_coarse_to_fine(&c, model.as_ref(), &d, &grid.with_resolution(n)?, None, &s.solver)?;
                (r.fine, Some(r.coarse))
            }
            None => (solve(&c, &c, model.as_ref(), &d, &s.solver)?, None),
        };
        *info = HjsafeSolveInfo {
            iterations: res.iterations,
            coarse_iterations: coarse.as_ref().map_or(0, |c| c.iterations),
            converged: res.converged,
            dt: res.dt,
            wall_seconds: (res.wall_time + coarse.map_or_else(Default::default, |c| c.wall_time)).as_secs_f64(),
            safe_nodes: res.value.count_at_or_below(0.0),
        };
        *out_field = Box::into_raw(Box::new(HjsafeField(res.value)));
        Ok(())
    })
}

/// Reads an HJVF file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_load(path: *const c_char, out: *mut *mut HjsafeField) -> HjsafeStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let field = hjvf::load(PathBuf::from(string(path)?))?;
        *out = Box::into_raw(Box::new(HjsafeField(field)));
        Ok(())
    })
}

/// Writes an HJVF file.
///
/// # Safety
/// `field` must be a valid handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_save(field: *const HjsafeField, path: *const c_char) -> HjsafeStatus {
    guard(|| {
        hjvf::save(PathBuf::from(string(path)?), &borrow(field)?.0)?;
        Ok(())
    })
}

/// # Safety
/// `field` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_free(field: *mut HjsafeField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Number of grid dimensions, or 0 for a null handle.
///
/// # Safety
/// `field` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_ndims(field: *const HjsafeField) -> usize {
    field.as_ref().map_or(0, |f| f.0.grid().ndims())
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `field` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_len(field: *const HjsafeField) -> usize {
    field.as_ref().map_or(0, |f| f.0.grid().len())
}

/// Copies the nodes per dimension into `out[0..cap]`; `cap` must be at least
/// the number of dimensions.
///
/// # Safety
/// `out` must point to `cap` writable elements.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_shape(field: *const HjsafeField, out: *mut usize, cap: usize) -> HjsafeStatus {
    guard(|| {
        let shape = borrow(field)?.0.grid().shape();
        if cap < shape.len() {
            return Err(invalid(format!("buffer holds {cap} entries, need {}", shape.len())));
        }
        if out.is_null() {
            return Err(Failure(HjsafeStatus::NullPointer, "null array".into()));
        }
        ptr::copy_nonoverlapping(shape.as_ptr(), out, shape.len());
        Ok(())
    })
}

/// Copies the node values (row-major, last axis fastest) into `out[0..cap]`.
///
/// # Safety
/// `out` must point to `cap` writable elements.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_values(field: *const HjsafeField, out: *mut f64, cap: usize) -> HjsafeStatus {
    guard(|| {
        let values = borrow(field)?.0.values();
        if cap < values.len() {
            return Err(invalid(format!("buffer holds {cap} entries, need {}", values.len())));
        }
        if out.is_null() {
            return Err(Failure(HjsafeStatus::NullPointer, "null array".into()));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        Ok(())
    })
}

/// Multilinear interpolation at `x[0..n]`; states outside the grid are
/// clamped and reported through `out_of_domain` (may be null).
///
/// # Safety
/// `x` must point to `n` elements; `value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_field_value_at(
    field: *const HjsafeField,
    x: *const f64,
    n: usize,
    value: *mut f64,
    out_of_domain: *mut bool,
) -> HjsafeStatus {
    guard(|| {
        let q = borrow(field)?.0.interp(slice(x, n)?)?;
        *out_ptr(value)? = q.value;
        if let Some(o) = out_of_domain.as_mut() {
            *o = q.out_of_domain;
        }
        Ok(())
    })
}

/// Builds the safety filter of subsystem `index` from a solved value field
/// (copied) and the subsystem's prior disturbance bounds.
///
/// # Safety
/// Handles must be valid; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_filter_new(
    scenario: *const HjsafeScenario,
    index: usize,
    field: *const HjsafeField,
    out: *mut *mut HjsafeFilter,
) -> HjsafeStatus {
    guard(|| {
        let s = &borrow(scenario)?.0;
        let value = borrow(field)?.0.clone();
        let out = out_ptr(out)?;
        let spec = subsystem(s, index)?;
        let d = prior_bounds(spec, &s.gp, value.grid())?;
        let period = if s.filter.control_period > 0.0 { s.filter.control_period } else { s.timing.control_period };
        let cfg = FilterConfig { control_period: period, ..s.filter.clone() };
        let filter = SafetyFilter::new(value, spec.model.build()?, d, cfg)?;
        *out = Box::into_raw(Box::new(HjsafeFilter(filter)));
        Ok(())
    })
}

/// # Safety
/// `filter` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_filter_free(filter: *mut HjsafeFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// Filters the performance control `u_perf[0..nu]` at state `x[0..nx]`
/// (subsystem coordinates) and writes the applied control to `u_out[0..nu]`.
///
/// # Safety
/// Arrays must hold the stated number of elements; `decision` may be null.
#[no_mangle]
pub unsafe extern "C" fn hjsafe_filter_apply(
    filter: *const HjsafeFilter,
    x: *const f64,
    nx: usize,
    u_perf: *const f64,
    nu: usize,
    u_out: *mut f64,
    decision: *mut HjsafeDecision,
) -> HjsafeStatus {
    guard(|| {
        let f = &borrow(filter)?.0;
        let (x, u) = (slice(x, nx)?, slice(u_perf, nu)?);
        if nx != f.model().state_dim() || nu != f.model().control_dim() {
            return Err(invalid(format!(
                "expected {} states and {} controls, got {nx} and {nu}",
                f.model().state_dim(),
                f.model().control_dim()
            )));
        }
        if u_out.is_null() {
            return Err(Failure(HjsafeStatus::NullPointer, "null array".into()));
        }
        let d = f.filter(x, u)?;
        ptr::copy_nonoverlapping(d.control.as_ptr(), u_out, nu);
        if let Some(out) = decision.as_mut() {
            *out = HjsafeDecision { overridden: d.overridden, value: d.value, out_of_domain: d.out_of_domain };
        }
        Ok(())
    })
}
