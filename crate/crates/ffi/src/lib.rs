//! C ABI over the `kslb` solver.
//!
//! States are opaque heap handles. Every fallible call returns a [`KslbStatus`];
//! on failure the message is kept per thread and read back with
//! [`kslb_last_error_message`]. Panics are caught at the boundary and reported
//! as [`KslbStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kslb::checkpoint::Checkpoint;
use kslb::fields::{make_grid, ScalarField};
use kslb::monitors::mu_zero_estimate;
use kslb::solver::{run, Params, RunConfig, RunStatus, State};
use kslb::KslbError;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KslbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Precondition = 3,
    NumericalFailure = 4,
    Io = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// Outcome of a completed call to [`kslb_run`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KslbRunStatus {
    Completed = 0,
    BlowUpSuspected = 1,
    NumericalFailure = 2,
}

/// Opaque solver state: time plus `n` and `c` on a periodic grid.
pub struct KslbState {
    inner: State,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KslbParams {
    pub chi: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KslbRunConfig {
    pub dt: f64,
    pub t_end: f64,
    pub monitor_every: f64,
    /// Cap on `‖n‖∞ + ‖c‖_{W1,∞}`; 0 selects the default.
    pub blowup_cap: f64,
    pub dealias: bool,
    pub adaptive: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KslbRunSummary {
    pub status: KslbRunStatus,
    /// Time at which the run stopped.
    pub t_final: f64,
    pub steps: u64,
    pub sup_linf_n: f64,
    pub sup_w1inf_c: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &KslbError) -> KslbStatus {
    match e {
        KslbError::InvalidGrid(_)
        | KslbError::InvalidArgument(_)
        | KslbError::ShapeMismatch(_)
        | KslbError::NonFinite { .. }
        | KslbError::Config(_) => KslbStatus::InvalidArgument,
        KslbError::Precondition(_) => KslbStatus::Precondition,
        KslbError::NumericalFailure { .. } => KslbStatus::NumericalFailure,
        KslbError::Checkpoint(_) => KslbStatus::Checkpoint,
        KslbError::Io(_) => KslbStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Kslb(KslbError),
}

impl From<KslbError> for Failure {
    fn from(e: KslbError) -> Self {
        Failure::Kslb(e)
    }
}

/// Runs `f`, records any failure in the thread's last error and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KslbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KslbStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            KslbStatus::NullPointer
        }
        Ok(Err(Failure::Kslb(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            KslbStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| KslbError::InvalidArgument("path is not valid UTF-8".into()).into())
}

fn params_of(p: &KslbParams) -> Result<Params, KslbError> {
    Params::new(p.chi, p.tau, p.lambda, p.mu)
}

fn config_of(c: &KslbRunConfig) -> RunConfig {
    RunConfig {
        dt: c.dt,
        t_end: c.t_end,
        monitor_every: c.monitor_every,
        blowup_cap: (c.blowup_cap != 0.0).then_some(c.blowup_cap),
        dealias: c.dealias,
        adaptive: c.adaptive,
    }
}

fn into_handle(state: State) -> *mut KslbState {
    Box::into_raw(Box::new(KslbState { inner: state }))
}

/// Message of the last failed call on this thread, or null if the last call
/// succeeded. The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kslb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static, nul-terminated crate version.
#[no_mangle]
pub extern "C" fn kslb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fills `out` with the library defaults.
///
/// # Safety
/// `out` must be null or point to writable memory for one `KslbRunConfig`.
#[no_mangle]
pub unsafe extern "C" fn kslb_run_config_default(out: *mut KslbRunConfig) -> KslbStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let d = RunConfig::default();
        *out = KslbRunConfig {
            dt: d.dt,
            t_end: d.t_end,
            monitor_every: d.monitor_every,
            blowup_cap: 0.0,
            dealias: d.dealias,
            adaptive: d.adaptive,
        };
        Ok(())
    })
}

/// Builds a state from `n_axis^d` row-major samples of `n` and `c`.
///
/// # Safety
/// `n` and `c` must be null or point to `n_axis^d` readable doubles each;
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn kslb_state_new(
    d: u32,
    n_axis: u32,
    box_len: f64,
    t: f64,
    n: *const f64,
    c: *const f64,
    out: *mut *mut KslbState,
) -> KslbStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if n.is_null() {
            return Err(Failure::Null("n"));
        }
        if c.is_null() {
            return Err(Failure::Null("c"));
        }
        let grid = make_grid(d as usize, n_axis as usize, box_len)?;
        let len = grid.len();
        let nf = ScalarField::new(grid, std::slice::from_raw_parts(n, len).to_vec())?;
        let cf = ScalarField::new(grid, std::slice::from_raw_parts(c, len).to_vec())?;
        *out = into_handle(State::new(t, nf, cf)?);
        Ok(())
    })
}

/// Releases a state. Null is ignored.
///
/// # Safety
/// `state` must be null or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn kslb_state_free(state: *mut KslbState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Number of grid points per field (`n_axis^d`), or 0 for null.
///
/// # Safety
/// `state` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kslb_state_len(state: *const KslbState) -> usize {
    state.as_ref().map_or(0, |s| s.inner.grid().len())
}

/// Time of the state, or NaN for null.
///
/// # Safety
/// `state` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kslb_state_time(state: *const KslbState) -> f64 {
    state.as_ref().map_or(f64::NAN, |s| s.inner.t)
}

unsafe fn copy_field(
    state: *const KslbState,
    pick: impl FnOnce(&State) -> &ScalarField,
    buf: *mut f64,
    len: usize,
) -> KslbStatus {
    guard(|| {
        let s = deref(state, "state")?;
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        let vals = pick(&s.inner).values();
        if len != vals.len() {
            return Err(KslbError::ShapeMismatch(format!("buffer holds {len}, field has {}", vals.len())).into());
        }
        ptr::copy_nonoverlapping(vals.as_ptr(), buf, len);
        Ok(())
    })
}

/// Copies `n` into `buf`, which must hold exactly [`kslb_state_len`] doubles.
///
/// # Safety
/// `state` must be null or a live handle; `buf` must be null or point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn kslb_state_copy_n(state: *const KslbState, buf: *mut f64, len: usize) -> KslbStatus {
    copy_field(state, |s| &s.n, buf, len)
}

/// Copies `c` into `buf`, which must hold exactly [`kslb_state_len`] doubles.
///
/// # Safety
/// `state` must be null or a live handle; `buf` must be null or point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn kslb_state_copy_c(state: *const KslbState, buf: *mut f64, len: usize) -> KslbStatus {
    copy_field(state, |s| &s.c, buf, len)
}

/// Reads a checkpoint file into a new state.
///
/// # Safety
/// `path` must be null or a nul-terminated string; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn kslb_checkpoint_load(path: *const c_char, out: *mut *mut KslbState) -> KslbStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cp = Checkpoint::load(path_arg(path)?)?;
        *out = into_handle(State::new(cp.t, cp.n, cp.c)?);
        Ok(())
    })
}

/// Writes `state` as a checkpoint file.
///
/// # Safety
/// `state` must be null or a live handle; `path` must be null or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kslb_checkpoint_save(state: *const KslbState, path: *const c_char) -> KslbStatus {
    guard(|| {
        let s = deref(state, "state")?;
        let path = path_arg(path)?;
        Checkpoint::new(s.inner.t, s.inner.n.clone(), s.inner.c.clone())?.save(path)?;
        Ok(())
    })
}

/// Smallest damping meeting the threshold conditions for exponent `k` in dimension `d`.
///
/// # Safety
/// `params` and `out` must be null or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn kslb_mu_zero_estimate(
    k: u32,
    d: u32,
    params: *const KslbParams,
    out: *mut f64,
) -> KslbStatus {
    guard(|| {
        let p = params_of(deref(params, "params")?)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = mu_zero_estimate(k as usize, d as usize, &p)?.mu0;
        Ok(())
    })
}

/// Integrates from `initial` to `config.t_end`. The final state is returned as a
/// new handle in `out_final` (also on blow-up or numerical failure, where it is
/// the last accepted state); `summary` receives the outcome.
///
/// # Safety
/// All pointers must be null or valid; `initial` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kslb_run(
    initial: *const KslbState,
    params: *const KslbParams,
    config: *const KslbRunConfig,
    out_final: *mut *mut KslbState,
    summary: *mut KslbRunSummary,
) -> KslbStatus {
    guard(|| {
        let s0 = deref(initial, "initial")?;
        let p = params_of(deref(params, "params")?)?;
        let cfg = config_of(deref(config, "config")?);
        if out_final.is_null() {
            return Err(Failure::Null("out_final"));
        }
        let summary = summary.as_mut().ok_or(Failure::Null("summary"))?;
        let r = run(&s0.inner, &p, &cfg, &mut [])?;
        let (status, t_final) = match r.status {
            RunStatus::Completed => (KslbRunStatus::Completed, r.final_state.t),
            RunStatus::BlowUpSuspected(t) => (KslbRunStatus::BlowUpSuspected, t),
            RunStatus::NumericalFailure(t) => (KslbRunStatus::NumericalFailure, t),
        };
        *summary = KslbRunSummary {
            status,
            t_final,
            steps: r.steps as u64,
            sup_linf_n: r.trace.iter().map(|s| s.linf_n).fold(0.0, f64::max),
            sup_w1inf_c: r.trace.iter().map(|s| s.w1inf_c()).fold(0.0, f64::max),
        };
        *out_final = into_handle(r.final_state);
        Ok(())
    })
}
