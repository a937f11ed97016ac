//! C ABI over `dfl-core`.
//!
//! Every function returns a [`DflStatus`]. On failure the message is kept in
//! a thread-local slot readable with [`dfl_last_error_message`]. Handles are
//! opaque, created by `*_new`/`*_from_*` functions and released with the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dfl::analysis::{cdfl_bound, dfl_bound, lr_feasible, BoundParams};
use dfl::harness::{run_experiment, ExperimentConfig, RunRecord};
use dfl::topology::{MixingMatrix, TopologySpec};
use dfl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidTopology = 3,
    Numeric = 4,
    Diverged = 5,
    InfeasibleTopology = 6,
    InsufficientCommunication = 7,
    Io = 8,
    Panic = 9,
}

fn status_of(e: &Error) -> DflStatus {
    match e {
        Error::InvalidTopology(_) => DflStatus::InvalidTopology,
        Error::Numeric(_) => DflStatus::Numeric,
        Error::Diverged { .. } => DflStatus::Diverged,
        Error::InfeasibleTopology => DflStatus::InfeasibleTopology,
        Error::InsufficientCommunication { .. } => DflStatus::InsufficientCommunication,
        Error::Io { .. } => DflStatus::Io,
        _ => DflStatus::InvalidArgument,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (DflStatus, String)>) -> DflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DflStatus::Ok
        }
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
            DflStatus::Panic
        }
    }
}

fn lift(e: Error) -> (DflStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DflStatus, String) {
    (DflStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DflStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        (
            DflStatus::InvalidArgument,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (DflStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DflStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dfl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dfl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque mixing matrix.
pub struct DflMixing(MixingMatrix);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DflSpectral {
    pub nodes: usize,
    pub zeta: f64,
    pub beta: f64,
    pub rho: f64,
}

/// Builds a mixing matrix from a topology string such as `ring`,
/// `group_ring:5x2` or `adjacency:<path>`; `nodes` is used when the string
/// carries no count (0 means none).
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_mixing_new(
    spec: *const c_char,
    nodes: usize,
    out: *mut *mut DflMixing,
) -> DflStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let spec = str_arg(spec, "spec")?;
        let nodes = (nodes > 0).then_some(nodes);
        let c = TopologySpec::parse(spec, nodes)
            .and_then(|t| t.build())
            .map_err(lift)?;
        *out = Box::into_raw(Box::new(DflMixing(c)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`dfl_mixing_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dfl_mixing_free(m: *mut DflMixing) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_mixing_spectral(
    m: *const DflMixing,
    out: *mut DflSpectral,
) -> DflStatus {
    guard(|| {
        let m = in_ref(m, "mixing")?;
        let out = out_ref(out, "out")?;
        let s = m.0.spectral().map_err(lift)?;
        *out = DflSpectral {
            nodes: m.0.n(),
            zeta: s.zeta,
            beta: s.beta,
            rho: s.rho,
        };
        Ok(())
    })
}

/// Entry `C[row][col]`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_mixing_entry(
    m: *const DflMixing,
    row: usize,
    col: usize,
    out: *mut f64,
) -> DflStatus {
    guard(|| {
        let m = in_ref(m, "mixing")?;
        let out = out_ref(out, "out")?;
        let n = m.0.n();
        if row >= n || col >= n {
            return Err((
                DflStatus::InvalidArgument,
                format!("index ({row}, {col}) outside {n} x {n}"),
            ));
        }
        *out = m.0.entries()[(row, col)];
        Ok(())
    })
}

/// Bound constants. `tau2` may be infinite; a NaN `theta` selects the
/// default `p / (2 (1 − p))`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DflBoundParams {
    pub l: f64,
    pub mu: f64,
    pub sigma_sq: f64,
    pub sigma_bar_sq: f64,
    pub g_sq: f64,
    pub zeta: f64,
    pub beta: f64,
    pub delta: f64,
    pub eta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub n: f64,
    pub t: f64,
    pub f_gap: f64,
    pub a: f64,
    pub theta: f64,
}

impl From<BoundParams> for DflBoundParams {
    fn from(p: BoundParams) -> Self {
        Self {
            l: p.l,
            mu: p.mu,
            sigma_sq: p.sigma_sq,
            sigma_bar_sq: p.sigma_bar_sq,
            g_sq: p.g_sq,
            zeta: p.zeta,
            beta: p.beta,
            delta: p.delta,
            eta: p.eta,
            tau1: p.tau1,
            tau2: p.tau2,
            n: p.n,
            t: p.t,
            f_gap: p.f_gap,
            a: p.a,
            theta: p.theta.unwrap_or(f64::NAN),
        }
    }
}

impl From<DflBoundParams> for BoundParams {
    fn from(p: DflBoundParams) -> Self {
        Self {
            l: p.l,
            mu: p.mu,
            sigma_sq: p.sigma_sq,
            sigma_bar_sq: p.sigma_bar_sq,
            g_sq: p.g_sq,
            zeta: p.zeta,
            beta: p.beta,
            delta: p.delta,
            eta: p.eta,
            tau1: p.tau1,
            tau2: p.tau2,
            n: p.n,
            t: p.t,
            f_gap: p.f_gap,
            a: p.a,
            theta: (!p.theta.is_nan()).then_some(p.theta),
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DflDflBound {
    pub sync_sgd: f64,
    pub local_drift: f64,
    pub total: f64,
    pub feasible: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DflCdflBound {
    pub s_k: f64,
    pub initial: f64,
    pub noise: f64,
    pub noise_drift: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub compression: f64,
    pub total: f64,
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_bound_params_default(out: *mut DflBoundParams) -> DflStatus {
    guard(|| {
        *out_ref(out, "out")? = BoundParams::default().into();
        Ok(())
    })
}

/// # Safety
/// `params` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_bound_dfl(
    params: *const DflBoundParams,
    out: *mut DflDflBound,
) -> DflStatus {
    guard(|| {
        let p: BoundParams = (*in_ref(params, "params")?).into();
        let out = out_ref(out, "out")?;
        let b = dfl_bound(&p);
        *out = DflDflBound {
            sync_sgd: b.sync_sgd,
            local_drift: b.local_drift,
            total: b.total,
            feasible: b.feasible,
        };
        Ok(())
    })
}

/// Whether the step size satisfies the feasibility condition.
///
/// # Safety
/// `params` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_bound_lr_feasible(
    params: *const DflBoundParams,
    out: *mut bool,
) -> DflStatus {
    guard(|| {
        let p: BoundParams = (*in_ref(params, "params")?).into();
        let out = out_ref(out, "out")?;
        *out = lr_feasible(&p).map_err(lift)?;
        Ok(())
    })
}

/// # Safety
/// `params` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_bound_cdfl(
    params: *const DflBoundParams,
    rounds: usize,
    u0_dist_sq: f64,
    out: *mut DflCdflBound,
) -> DflStatus {
    guard(|| {
        let p: BoundParams = (*in_ref(params, "params")?).into();
        let out = out_ref(out, "out")?;
        let b = cdfl_bound(&p, rounds, u0_dist_sq).map_err(lift)?;
        *out = DflCdflBound {
            s_k: b.s_k,
            initial: b.initial,
            noise: b.noise,
            noise_drift: b.noise_drift,
            d1: b.d1,
            d2: b.d2,
            d3: b.d3,
            compression: b.compression,
            total: b.total,
        };
        Ok(())
    })
}

/// Opaque experiment config.
pub struct DflExperiment(ExperimentConfig);

/// Opaque run record.
pub struct DflRecord(RunRecord);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DflSummary {
    pub seeds: usize,
    pub diverged_seeds: usize,
    pub median_final_loss: f64,
    pub median_summary_grad_norm_sq: f64,
    pub total_bytes: u64,
    pub f_star: f64,
}

/// Parses a TOML experiment config.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_experiment_from_toml(
    toml: *const c_char,
    out: *mut *mut DflExperiment,
) -> DflStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(toml, "toml")?;
        let cfg = ExperimentConfig::from_toml_str(text).map_err(lift)?;
        *out = Box::into_raw(Box::new(DflExperiment(cfg)));
        Ok(())
    })
}

/// # Safety
/// `e` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dfl_experiment_set_output(
    e: *mut DflExperiment,
    path: *const c_char,
) -> DflStatus {
    guard(|| {
        let e = out_ref(e, "experiment")?;
        e.0.run.output = PathBuf::from(str_arg(path, "path")?);
        Ok(())
    })
}

/// # Safety
/// `e` must come from [`dfl_experiment_from_toml`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dfl_experiment_free(e: *mut DflExperiment) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Runs every seed and writes the output files. Seeds that diverge are
/// recorded in the summary, not reported as an error.
///
/// # Safety
/// `e` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_experiment_run(
    e: *const DflExperiment,
    out: *mut *mut DflRecord,
) -> DflStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let e = in_ref(e, "experiment")?;
        let rec = run_experiment(&e.0).map_err(lift)?;
        *out = Box::into_raw(Box::new(DflRecord(rec)));
        Ok(())
    })
}

/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfl_record_summary(
    r: *const DflRecord,
    out: *mut DflSummary,
) -> DflStatus {
    guard(|| {
        let r = &in_ref(r, "record")?.0;
        let out = out_ref(out, "out")?;
        *out = DflSummary {
            seeds: r.seeds.len(),
            diverged_seeds: r.summary.diverged_seeds,
            median_final_loss: r.summary.median_final_loss,
            median_summary_grad_norm_sq: r.summary.median_summary_grad_norm_sq,
            total_bytes: r.summary.total_bytes,
            f_star: r.f_star,
        };
        Ok(())
    })
}

/// # Safety
/// `r` must come from [`dfl_experiment_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dfl_record_free(r: *mut DflRecord) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
