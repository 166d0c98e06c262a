//! C interface to the semi-infinite programming solvers.
//!
//! Problems and run results are opaque handles created and released by
//! this library. Every fallible call returns a [`SipStatus`]; on failure a
//! message is available from [`sip_last_error_message`] on the same thread.
//! Panics never cross the boundary; they are reported as
//! `SIP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sip_core::diagnostics::feasibility_measure;
use sip_core::driver::{run, Algorithm, DiscretizationState, DriverOptions, FinalStatus, RunResult, TerminationMode};
use sip_core::model::{Interval, SipProblem as CoreProblem};
use sip_core::problems;
use sip_core::spec_loader::load_problem;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    ParseError = 4,
    SolverFailure = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SipAlgorithm {
    BlankenshipFalk = 0,
    Qcad = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SipTermination {
    /// Distance to the problem's known solution below `tol_dist`.
    Known = 0,
    /// Feasibility below `tol_feas` and stationarity below `tol_stat`.
    Practical = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SipFinalStatus {
    ToleranceMet = 0,
    MaxIter = 1,
    SubsolverFailure = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SipRunOptions {
    pub algorithm: SipAlgorithm,
    pub termination: SipTermination,
    pub tol_dist: f64,
    pub tol_feas: f64,
    pub tol_stat: f64,
    pub max_iter: u32,
}

/// Opaque problem handle.
pub struct SipProblem {
    inner: CoreProblem,
}

/// Opaque run result handle.
pub struct SipRunResult {
    inner: RunResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

type FfiResult = Result<(), (SipStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult) -> SipStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SipStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SipStatus::Panic
        }
    }
}

fn null(what: &str) -> (SipStatus, String) {
    (SipStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, (SipStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (SipStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (SipStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (SipStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sip_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// QCAD, practical termination (1e-6 / 1e-6), at most 50 iterations.
#[no_mangle]
pub extern "C" fn sip_run_options_default() -> SipRunOptions {
    SipRunOptions {
        algorithm: SipAlgorithm::Qcad,
        termination: SipTermination::Practical,
        tol_dist: 1e-4,
        tol_feas: 1e-6,
        tol_stat: 1e-6,
        max_iter: 50,
    }
}

/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sip_problem_from_registry(name: *const c_char, out: *mut *mut SipProblem) -> SipStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = c_str(name, "name")?;
        let p = problems::by_name(name).ok_or_else(|| (SipStatus::NotFound, format!("unknown problem '{name}'")))?;
        *out = Box::into_raw(Box::new(SipProblem { inner: p }));
        Ok(())
    })
}

/// Builds a problem from the text of a TOML problem file.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sip_problem_from_spec(text: *const c_char, out: *mut *mut SipProblem) -> SipStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = c_str(text, "text")?;
        let p = load_problem(text).map_err(|e| (SipStatus::ParseError, e.to_string()))?;
        *out = Box::into_raw(Box::new(SipProblem { inner: p }));
        Ok(())
    })
}

/// # Safety
/// `problem` must come from this library and not be freed twice. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn sip_problem_free(problem: *mut SipProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Writes `n`, `m` and the number of constraint families `p`. Any output
/// pointer may be null.
///
/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sip_problem_dims(
    problem: *const SipProblem,
    n: *mut usize,
    m: *mut usize,
    p: *mut usize,
) -> SipStatus {
    guard(|| {
        let pr = &problem.as_ref().ok_or_else(|| null("problem"))?.inner;
        for (ptr, v) in [(n, pr.n), (m, pr.m), (p, pr.p())] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}

/// Runs a solver. `options` may be null for the defaults; `x0` may be null
/// for the problem's initial point (or the center of its box).
///
/// # Safety
/// `problem` must be a live handle, `x0` must point to `x0_len` doubles when
/// non-null and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sip_run(
    problem: *const SipProblem,
    options: *const SipRunOptions,
    x0: *const f64,
    x0_len: usize,
    out: *mut *mut SipRunResult,
) -> SipStatus {
    guard(|| {
        let p = &problem.as_ref().ok_or_else(|| null("problem"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let o = options.as_ref().copied().unwrap_or_else(|| sip_run_options_default());
        let x0 = if x0.is_null() {
            p.initial_point
                .clone()
                .unwrap_or_else(|| p.master_bounds().iter().map(Interval::mid).collect())
        } else {
            if x0_len != p.n {
                return Err((
                    SipStatus::InvalidArgument,
                    format!("x0 has {x0_len} entries, expected {}", p.n),
                ));
            }
            slice(x0, x0_len, "x0")?.to_vec()
        };
        let termination = match o.termination {
            SipTermination::Known => TerminationMode::Known { tol_dist: o.tol_dist },
            SipTermination::Practical => TerminationMode::Practical {
                tol_feas: o.tol_feas,
                tol_stat: o.tol_stat,
            },
        };
        let opts = DriverOptions {
            termination,
            max_iter: o.max_iter as usize,
            ..Default::default()
        };
        let alg = match o.algorithm {
            SipAlgorithm::BlankenshipFalk => Algorithm::BlankenshipFalk,
            SipAlgorithm::Qcad => Algorithm::Qcad,
        };
        let r = run(alg, p, &x0, DiscretizationState::empty(p), &opts)
            .map_err(|e| (SipStatus::InvalidArgument, e.to_string()))?;
        let failed = r.final_status == FinalStatus::SubsolverFailure;
        let msg = r.warnings.last().cloned().unwrap_or_default();
        *out = Box::into_raw(Box::new(SipRunResult { inner: r }));
        if failed {
            return Err((SipStatus::SolverFailure, msg));
        }
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`sip_run`] and not be freed twice. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn sip_run_result_free(result: *mut SipRunResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Number of recorded iterates (iterations + 1).
///
/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sip_run_result_len(result: *const SipRunResult, out: *mut usize) -> SipStatus {
    guard(|| {
        let r = &result.as_ref().ok_or_else(|| null("result"))?.inner;
        *out.as_mut().ok_or_else(|| null("out"))? = r.history.len();
        Ok(())
    })
}

/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sip_run_result_status(result: *const SipRunResult, out: *mut SipFinalStatus) -> SipStatus {
    guard(|| {
        let r = &result.as_ref().ok_or_else(|| null("result"))?.inner;
        *out.as_mut().ok_or_else(|| null("out"))? = match r.final_status {
            FinalStatus::ToleranceMet => SipFinalStatus::ToleranceMet,
            FinalStatus::MaxIter => SipFinalStatus::MaxIter,
            FinalStatus::SubsolverFailure => SipFinalStatus::SubsolverFailure,
        };
        Ok(())
    })
}

/// Copies iterate `k` into `x_out` (`len` must equal n) and writes its
/// objective, feasibility, stationarity residual and distance to the known
/// solution (NaN when unknown). Scalar outputs may be null.
///
/// # Safety
/// `result` must be a live handle; `x_out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sip_run_result_iterate(
    result: *const SipRunResult,
    k: usize,
    x_out: *mut f64,
    len: usize,
    objective: *mut f64,
    feasibility: *mut f64,
    stationarity: *mut f64,
    dist_to_known: *mut f64,
) -> SipStatus {
    guard(|| {
        let r = &result.as_ref().ok_or_else(|| null("result"))?.inner;
        let rec = r
            .history
            .get(k)
            .ok_or_else(|| (SipStatus::OutOfRange, format!("iterate {k} of {}", r.history.len())))?;
        if len != rec.x.len() {
            return Err((
                SipStatus::InvalidArgument,
                format!("buffer has {len} entries, expected {}", rec.x.len()),
            ));
        }
        out_slice(x_out, len, "x_out")?.copy_from_slice(&rec.x);
        for (ptr, v) in [
            (objective, rec.objective),
            (feasibility, rec.feasibility),
            (stationarity, rec.stationarity_residual),
            (dist_to_known, rec.dist_to_known.unwrap_or(f64::NAN)),
        ] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}

/// Copies the final iterate into `x_out` (`len` must equal n).
///
/// # Safety
/// `result` must be a live handle; `x_out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sip_run_result_final_x(result: *const SipRunResult, x_out: *mut f64, len: usize) -> SipStatus {
    let n = match result.as_ref() {
        Some(r) => r.inner.history.len(),
        None => return guard(|| Err(null("result"))),
    };
    sip_run_result_iterate(
        result,
        n - 1,
        x_out,
        len,
        ptr::null_mut(),
        ptr::null_mut(),
        ptr::null_mut(),
        ptr::null_mut(),
    )
}

/// `max_i max_{y in Y} g_i(x, y)`.
///
/// # Safety
/// `problem` must be a live handle, `x` must hold `len` doubles and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sip_feasibility(
    problem: *const SipProblem,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> SipStatus {
    guard(|| {
        let p = &problem.as_ref().ok_or_else(|| null("problem"))?.inner;
        if len != p.n {
            return Err((
                SipStatus::InvalidArgument,
                format!("x has {len} entries, expected {}", p.n),
            ));
        }
        let x = slice(x, len, "x")?;
        let v = feasibility_measure(p, x).map_err(|e| (SipStatus::SolverFailure, e.to_string()))?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}
