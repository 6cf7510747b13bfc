//! C ABI for the zapq toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_from_*`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`ZapqStatus`]; on failure a description is available from
//! [`zapq_last_error`] on the same thread until the next failing call.
//!
//! Matrices are passed as row-major `double` arrays.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use zapq::algorithms::{run_rng, warmup_a_hat, StepSchedule, TrainOptions, ZapState};
use zapq::linalg::{self, Matrix};
use zapq::mdp::{self, ChainSimulator, ChainState};
use zapq::{BehaviorPolicy, FiniteMdp, QFamily};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZapqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque finite MDP.
pub struct ZapqMdp {
    inner: FiniteMdp,
}

/// Opaque tabular Zap Q-learning run under the uniform randomized policy.
pub struct ZapqTrainer {
    mdp: FiniteMdp,
    family: QFamily,
    policy: BehaviorPolicy,
    schedule: StepSchedule,
    episodic: bool,
    state: ZapState,
    chain: Option<ChainState>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(status: ZapqStatus, message: impl Into<String>) -> ZapqStatus {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
    status
}

fn guard(f: impl FnOnce() -> Result<(), (ZapqStatus, String)>) -> ZapqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ZapqStatus::Ok,
        Ok(Err((status, message))) => set_error(status, message),
        Err(_) => set_error(ZapqStatus::Panic, "internal panic"),
    }
}

type Failure = (ZapqStatus, String);

fn null(name: &str) -> Failure {
    (ZapqStatus::NullPointer, format!("{name} is null"))
}

fn numerical(e: impl std::fmt::Display) -> Failure {
    (ZapqStatus::Numerical, e.to_string())
}

unsafe fn square_input(data: *const f64, dim: usize, name: &str) -> Result<Matrix, Failure> {
    if data.is_null() {
        return Err(null(name));
    }
    if dim == 0 {
        return Err((ZapqStatus::InvalidArgument, "dimension must be positive".into()));
    }
    let slice = std::slice::from_raw_parts(data, dim * dim);
    Ok(Matrix::from_row_slice(dim, dim, slice))
}

unsafe fn write_matrix(m: &Matrix, out: *mut f64, capacity: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let needed = m.nrows() * m.ncols();
    if capacity < needed {
        return Err((ZapqStatus::BufferTooSmall, format!("need {needed} entries, got {capacity}")));
    }
    let dst = std::slice::from_raw_parts_mut(out, needed);
    for (k, v) in m.transpose().iter().enumerate() {
        dst[k] = *v;
    }
    Ok(())
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn zapq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses an MDP from its TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zapq_mdp_from_toml(toml: *const c_char, out: *mut *mut ZapqMdp) -> ZapqStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null("toml"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(toml).to_str().map_err(|e| (ZapqStatus::Parse, e.to_string()))?;
        let inner = FiniteMdp::from_toml_str(text).map_err(|e| (ZapqStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(ZapqMdp { inner }));
        Ok(())
    })
}

/// # Safety
/// `mdp` must be null or a handle from [`zapq_mdp_from_toml`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn zapq_mdp_free(mdp: *mut ZapqMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// Writes the state and action counts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn zapq_mdp_shape(mdp: *const ZapqMdp, num_states: *mut usize, num_actions: *mut usize) -> ZapqStatus {
    guard(|| {
        let mdp = mdp.as_ref().ok_or_else(|| null("mdp"))?;
        if num_states.is_null() || num_actions.is_null() {
            return Err(null("out"));
        }
        *num_states = mdp.inner.num_states();
        *num_actions = mdp.inner.num_actions();
        Ok(())
    })
}

/// Optimal Q-function by value iteration to sup-norm tolerance `tol`,
/// written as a row-major `num_states × num_actions` array.
///
/// # Safety
/// `mdp` must be a live handle and `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn zapq_mdp_q_star(mdp: *const ZapqMdp, tol: f64, out: *mut f64, capacity: usize) -> ZapqStatus {
    guard(|| {
        let mdp = mdp.as_ref().ok_or_else(|| null("mdp"))?;
        if !(tol > 0.0) {
            return Err((ZapqStatus::InvalidArgument, format!("tol = {tol} must be positive")));
        }
        let q = mdp::q_star(&mdp.inner, tol).map_err(numerical)?;
        write_matrix(&q, out, capacity)
    })
}

/// Solves `A Σ + Σ Aᵀ + S = 0` for Hurwitz `A` and symmetric PSD `S`.
///
/// # Safety
/// `a`, `s` and `out` must each hold `dim * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn zapq_solve_lyapunov(a: *const f64, s: *const f64, dim: usize, out: *mut f64) -> ZapqStatus {
    guard(|| {
        let a = square_input(a, dim, "a")?;
        let s = square_input(s, dim, "s")?;
        let sigma = linalg::solve_lyapunov(&a, &s).map_err(numerical)?;
        write_matrix(&sigma, out, dim * dim)
    })
}

/// Regularized matrix gain `−(εI + ÂᵀÂ)^{-1} Âᵀ`.
///
/// # Safety
/// `a_hat` and `out` must each hold `dim * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn zapq_zap_gain(a_hat: *const f64, dim: usize, eps: f64, out: *mut f64) -> ZapqStatus {
    guard(|| {
        let a = square_input(a_hat, dim, "a_hat")?;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err((ZapqStatus::InvalidArgument, format!("eps = {eps} must be positive")));
        }
        write_matrix(&linalg::zap_gain(&a, eps), out, dim * dim)
    })
}

/// Real parts of the eigenvalues of `a`, sorted in descending order.
///
/// # Safety
/// `a` must hold `dim * dim` doubles and `out` must hold `dim`.
#[no_mangle]
pub unsafe extern "C" fn zapq_eig_real_parts(a: *const f64, dim: usize, out: *mut f64) -> ZapqStatus {
    guard(|| {
        let a = square_input(a, dim, "a")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut re: Vec<f64> = linalg::eigenvalues(&a).map_err(numerical)?.iter().map(|z| z.re).collect();
        re.sort_by(|x, y| y.total_cmp(x));
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&re);
        Ok(())
    })
}

/// Starts tabular Zap Q-learning on a copy of `mdp` with the default step
/// sizes `α_n = 1/(n+100)`, `β_n = (n+100)^{-0.85}` and `ε = 1e-6`. The
/// initial parameter and the sample path are determined by `seed`.
///
/// # Safety
/// `mdp` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zapq_trainer_new(mdp: *const ZapqMdp, seed: u64, out: *mut *mut ZapqTrainer) -> ZapqStatus {
    guard(|| {
        let mdp = mdp.as_ref().ok_or_else(|| null("mdp"))?.inner.clone();
        if out.is_null() {
            return Err(null("out"));
        }
        let family = QFamily::tabular(mdp.num_states(), mdp.num_actions());
        let policy = BehaviorPolicy::uniform(&mdp);
        let schedule = StepSchedule::diminishing(100, 0.85).map_err(numerical)?;
        let opts = TrainOptions::default();
        let episodic = mdp.is_episodic();
        let theta0 = family.initial_theta(&mut run_rng(seed, 1));
        let mut sim = ChainSimulator::new(&mdp, &policy, run_rng(seed, 0), |_| 0);
        let a0 = warmup_a_hat(&mdp, &family, &theta0, &mut sim, family.dim().max(100), episodic);
        let chain = Some(sim.into_state());
        let state = ZapState::new(theta0, a0, opts.eps, opts.gain_period, opts.eligibility_period)
            .with_projection(opts.projection_radius);
        *out = Box::into_raw(Box::new(ZapqTrainer { mdp, family, policy, schedule, episodic, state, chain }));
        Ok(())
    })
}

/// Advances the trainer by `num_steps` samples.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn zapq_trainer_step(trainer: *mut ZapqTrainer, num_steps: u64) -> ZapqStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or_else(|| null("trainer"))?;
        let chain = t.chain.take().expect("chain state present between calls");
        let mut sim = ChainSimulator::resume(&t.mdp, &t.policy, chain);
        for _ in 0..num_steps {
            let s = sim.step_with(|x| t.family.greedy_action(&t.state.theta, x));
            t.state.zap_q_step(&t.mdp, &t.family, &s, &t.schedule, t.episodic);
        }
        t.chain = Some(sim.into_state());
        if t.state.theta.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(numerical("parameter became non-finite"))
        }
    })
}

/// Number of parameters (`num_states · num_actions`).
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn zapq_trainer_dim(trainer: *const ZapqTrainer) -> usize {
    trainer.as_ref().map_or(0, |t| t.family.dim())
}

/// Steps taken so far.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn zapq_trainer_steps(trainer: *const ZapqTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.state.n)
}

/// Copies the current parameter; entry `x · num_actions + u` is `Q(x, u)`.
///
/// # Safety
/// `trainer` must be a live handle and `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn zapq_trainer_theta(trainer: *const ZapqTrainer, out: *mut f64, capacity: usize) -> ZapqStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let theta = &t.state.theta;
        if out.is_null() {
            return Err(null("out"));
        }
        if capacity < theta.len() {
            return Err((ZapqStatus::BufferTooSmall, format!("need {} entries, got {capacity}", theta.len())));
        }
        std::slice::from_raw_parts_mut(out, theta.len()).copy_from_slice(theta.as_slice());
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or a handle from [`zapq_trainer_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn zapq_trainer_free(trainer: *mut ZapqTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
