//! C ABI over the conformal estimator, the rolling history and the adaptive
//! residual model.
//!
//! Every fallible entry point returns a [`SiocpStatus`]; on failure a message
//! is stored per thread and can be read with [`siocp_last_error`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use siocp::conformal::{margin_from_threshold, ocp_update, MarginCase, OcpConfig, SiOcp, StepSchedule};
use siocp::history::HistoryStack;
use siocp::model::{AdaptConfig, AdaptiveModel, PARAM_COUNT};
use siocp::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiocpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    DataIntegrity = 4,
    Sequencing = 5,
    InsufficientHistory = 6,
    SimulationAbort = 7,
    Io = 8,
    Parse = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Which branch of the margin map produced a bound.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiocpMarginCase {
    Sqrt = 0,
    Trapezoid = 1,
    InitialPhase = 2,
}

impl From<MarginCase> for SiocpMarginCase {
    fn from(c: MarginCase) -> Self {
        match c {
            MarginCase::Sqrt => SiocpMarginCase::Sqrt,
            MarginCase::Trapezoid => SiocpMarginCase::Trapezoid,
            MarginCase::InitialPhase => SiocpMarginCase::InitialPhase,
        }
    }
}

/// Estimator parameters. `decaying != 0` selects `eta / sqrt(k)`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SiocpOcpConfig {
    pub alpha: f64,
    pub eta: f64,
    pub decaying: u8,
    pub q_init: f64,
    pub d_init: f64,
    pub lipschitz: f64,
    pub horizon: f64,
    pub dt: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SiocpMarginRecord {
    pub k: u64,
    pub thread: usize,
    pub q_active: f64,
    pub margin_case: SiocpMarginCase,
    pub d_bar: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SiocpScore {
    pub value: f64,
    pub tau1: f64,
    pub tau2: f64,
}

/// `f_nom(x, u, theta)` written into `out` (length `state_dim`).
pub type SiocpNominalFn = Option<
    unsafe extern "C" fn(
        x: *const f64,
        u: *const f64,
        theta: *const f64,
        out: *mut f64,
        user_data: *mut c_void,
    ),
>;

pub struct SiocpEstimator {
    inner: SiOcp,
}

pub struct SiocpHistory {
    stack: HistoryStack,
    state_dim: usize,
    input_dim: usize,
    theta_dim: usize,
}

pub struct SiocpModel {
    inner: AdaptiveModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> SiocpStatus {
    match e {
        Error::Config(_) => SiocpStatus::Config,
        Error::DataIntegrity(_) | Error::Json(_) => SiocpStatus::DataIntegrity,
        Error::Sequencing(_) => SiocpStatus::Sequencing,
        Error::InsufficientHistory { .. } => SiocpStatus::InsufficientHistory,
        Error::SimulationAbort { .. } => SiocpStatus::SimulationAbort,
        Error::Io { .. } => SiocpStatus::Io,
        Error::Parse { .. } => SiocpStatus::Parse,
    }
}

fn fail(status: SiocpStatus, msg: impl Into<String>) -> SiocpStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), SiocpStatus>) -> SiocpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SiocpStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SiocpStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: siocp::Result<T>) -> Result<T, SiocpStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SiocpStatus> {
    if p.is_null() {
        Err(fail(SiocpStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn siocp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// One threshold update; ties count as covered.
///
/// # Safety
/// `out` must point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn siocp_ocp_update(q: f64, score: f64, eta: f64, alpha: f64, out: *mut f64) -> SiocpStatus {
    guard(|| {
        non_null(out, "out")?;
        let next = lift(ocp_update(q, score, eta, alpha))?;
        *out = next;
        Ok(())
    })
}

/// Pointwise margin for a threshold.
///
/// # Safety
/// `d_bar` and `margin_case` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siocp_margin_from_threshold(
    q: f64,
    lipschitz: f64,
    horizon: f64,
    d_bar: *mut f64,
    margin_case: *mut SiocpMarginCase,
) -> SiocpStatus {
    guard(|| {
        non_null(d_bar, "d_bar")?;
        non_null(margin_case, "margin_case")?;
        if !(lipschitz > 0.0 && horizon > 0.0 && q.is_finite()) {
            return Err(fail(SiocpStatus::InvalidArgument, "need finite q and positive lipschitz and horizon"));
        }
        let m = margin_from_threshold(q, lipschitz, horizon);
        *d_bar = m.d_bar;
        *margin_case = m.case.into();
        Ok(())
    })
}

/// Defaults: alpha 0.1, eta 0.2, horizon 0.5 s, dt 0.05 s.
#[no_mangle]
pub extern "C" fn siocp_ocp_config_default() -> SiocpOcpConfig {
    let d = OcpConfig::default();
    SiocpOcpConfig {
        alpha: d.alpha,
        eta: d.schedule.initial(),
        decaying: 0,
        q_init: d.q_init,
        d_init: d.d_init,
        lipschitz: d.lipschitz,
        horizon: d.horizon,
        dt: d.dt,
    }
}

/// # Safety
/// `cfg` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siocp_estimator_new(cfg: *const SiocpOcpConfig, out: *mut *mut SiocpEstimator) -> SiocpStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(out, "out")?;
        let c = &*cfg;
        let schedule = if c.decaying != 0 {
            StepSchedule::Decaying { eta1: c.eta }
        } else {
            StepSchedule::Constant { eta: c.eta }
        };
        let ocp = OcpConfig {
            alpha: c.alpha,
            schedule,
            q_init: c.q_init,
            d_init: c.d_init,
            lipschitz: c.lipschitz,
            horizon: c.horizon,
            dt: c.dt,
        };
        let inner = lift(SiOcp::new(ocp))?;
        *out = Box::into_raw(Box::new(SiocpEstimator { inner }));
        Ok(())
    })
}

/// # Safety
/// `est` must come from [`siocp_estimator_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn siocp_estimator_free(est: *mut SiocpEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Runs step `k` at time `t_k`. `has_score` must be nonzero once
/// `t_k >= horizon`.
///
/// # Safety
/// `est` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siocp_estimator_step(
    est: *mut SiocpEstimator,
    k: u64,
    t_k: f64,
    score: f64,
    has_score: u8,
    out: *mut SiocpMarginRecord,
) -> SiocpStatus {
    guard(|| {
        non_null(est, "estimator")?;
        non_null(out, "out")?;
        let s = (has_score != 0).then_some(score);
        let r = lift((*est).inner.step(k, t_k, s))?;
        *out = SiocpMarginRecord {
            k: r.k,
            thread: r.thread,
            q_active: r.q_active,
            margin_case: r.case.into(),
            d_bar: r.d_bar,
        };
        Ok(())
    })
}

/// Number of staggered threads.
///
/// # Safety
/// `est` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn siocp_estimator_threads(est: *const SiocpEstimator) -> usize {
    if est.is_null() {
        return 0;
    }
    (*est).inner.bank().threads()
}

/// # Safety
/// `est` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siocp_estimator_threshold(est: *const SiocpEstimator, thread: usize, out: *mut f64) -> SiocpStatus {
    guard(|| {
        non_null(est, "estimator")?;
        non_null(out, "out")?;
        let bank = (*est).inner.bank();
        let q = bank
            .thresholds
            .get(thread)
            .ok_or_else(|| fail(SiocpStatus::InvalidArgument, format!("thread {thread} out of range")))?;
        *out = *q;
        Ok(())
    })
}

/// Writes the JSON checkpoint, NUL-terminated, into `buf`. `needed` receives
/// the required size including the terminator, also when the buffer is too
/// small.
///
/// # Safety
/// `buf` must be writable for `capacity` bytes (or null with capacity 0).
#[no_mangle]
pub unsafe extern "C" fn siocp_estimator_checkpoint(
    est: *const SiocpEstimator,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> SiocpStatus {
    guard(|| {
        non_null(est, "estimator")?;
        non_null(needed, "needed")?;
        let json = lift((*est).inner.bank().to_json())?;
        let bytes = json.as_bytes();
        *needed = bytes.len() + 1;
        if buf.is_null() || capacity < bytes.len() + 1 {
            return Err(fail(SiocpStatus::BufferTooSmall, "checkpoint buffer too small"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siocp_history_new(
    grid_dt: f64,
    window: f64,
    state_dim: usize,
    input_dim: usize,
    theta_dim: usize,
    out: *mut *mut SiocpHistory,
) -> SiocpStatus {
    guard(|| {
        non_null(out, "out")?;
        if state_dim == 0 {
            return Err(fail(SiocpStatus::InvalidArgument, "state_dim must be positive"));
        }
        let stack = lift(HistoryStack::new(grid_dt, window))?;
        *out = Box::into_raw(Box::new(SiocpHistory {
            stack,
            state_dim,
            input_dim,
            theta_dim,
        }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`siocp_history_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn siocp_history_free(h: *mut SiocpHistory) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], SiocpStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// Appends a grid sample. Arrays have the dimensions given at creation.
///
/// # Safety
/// `h` must be live; `x`, `u` and `theta` must be readable for their lengths.
#[no_mangle]
pub unsafe extern "C" fn siocp_history_push(
    h: *mut SiocpHistory,
    t: f64,
    x: *const f64,
    u: *const f64,
    theta: *const f64,
) -> SiocpStatus {
    guard(|| {
        non_null(h, "history")?;
        let hist = &mut *h;
        let x = slice(x, hist.state_dim, "x")?;
        let u = slice(u, hist.input_dim, "u")?;
        let theta = slice(theta, hist.theta_dim, "theta")?;
        lift(hist.stack.push(t, x, u, theta))
    })
}

/// Number of stored samples.
///
/// # Safety
/// `h` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn siocp_history_len(h: *const SiocpHistory) -> usize {
    if h.is_null() {
        return 0;
    }
    (*h).stack.len()
}

/// Integral score of the full window under the caller's nominal dynamics.
///
/// # Safety
/// `h` must be live, `out` writable, and `f_nom` must write `state_dim`
/// values without retaining the pointers it receives.
#[no_mangle]
pub unsafe extern "C" fn siocp_history_score(
    h: *const SiocpHistory,
    f_nom: SiocpNominalFn,
    user_data: *mut c_void,
    out: *mut SiocpScore,
) -> SiocpStatus {
    guard(|| {
        non_null(h, "history")?;
        non_null(out, "out")?;
        let f = f_nom.ok_or_else(|| fail(SiocpStatus::NullPointer, "f_nom is null"))?;
        let hist = &*h;
        let dynamics = |x: &[f64], u: &[f64], theta: &[f64], d: &mut [f64]| {
            f(x.as_ptr(), u.as_ptr(), theta.as_ptr(), d.as_mut_ptr(), user_data)
        };
        let s = lift(hist.stack.integral_score(&dynamics))?;
        *out = SiocpScore {
            value: s.value,
            tau1: s.argmax.0,
            tau2: s.argmax.1,
        };
        Ok(())
    })
}

/// Parameter count of the residual network.
#[no_mangle]
pub extern "C" fn siocp_model_param_count() -> usize {
    PARAM_COUNT
}

/// Seeded random network, also used as its own prior.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siocp_model_new_random(seed: u64, scale: f64, out: *mut *mut SiocpModel) -> SiocpStatus {
    guard(|| {
        non_null(out, "out")?;
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(fail(SiocpStatus::InvalidArgument, "scale must be finite and nonnegative"));
        }
        *out = Box::into_raw(Box::new(SiocpModel {
            inner: AdaptiveModel::random(seed, scale),
        }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`siocp_model_new_random`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn siocp_model_free(m: *mut SiocpModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// `out[3] = F(xi[5])`.
///
/// # Safety
/// `m` must be live, `xi` readable for 5 values and `out` writable for 3.
#[no_mangle]
pub unsafe extern "C" fn siocp_model_predict(m: *const SiocpModel, xi: *const f64, out: *mut f64) -> SiocpStatus {
    guard(|| {
        non_null(m, "model")?;
        non_null(out, "out")?;
        let xi = slice(xi, 5, "xi")?;
        let y = (*m).inner.predict(&xi.try_into().expect("length 5"));
        ptr::copy_nonoverlapping(y.as_ptr(), out, 3);
        Ok(())
    })
}

/// One adaptation step toward the acceleration residual `eps[3]`.
///
/// # Safety
/// `m` must be live, `xi` readable for 5 values and `eps` for 3.
#[no_mangle]
pub unsafe extern "C" fn siocp_model_adapt(
    m: *mut SiocpModel,
    xi: *const f64,
    eps: *const f64,
    gamma: f64,
    lambda: f64,
    dt: f64,
) -> SiocpStatus {
    guard(|| {
        non_null(m, "model")?;
        let xi = slice(xi, 5, "xi")?;
        let eps = slice(eps, 3, "eps")?;
        let cfg = AdaptConfig {
            gamma,
            lambda,
            dt,
            ..AdaptConfig::default()
        };
        lift(cfg.validate())?;
        lift((*m).inner.adapt_step(&xi.try_into().expect("length 5"), &eps.try_into().expect("length 3"), &cfg))
    })
}

/// Euclidean norm of the current parameters; negative for a null handle.
///
/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn siocp_model_theta_norm(m: *const SiocpModel) -> f64 {
    if m.is_null() {
        return -1.0;
    }
    (*m).inner.theta_norm()
}
