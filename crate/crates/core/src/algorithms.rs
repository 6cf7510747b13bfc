//! Learning recursions: Watkins' Q-learning, GQ-learning, the generic Zap
//! stochastic-approximation step and Zap Q-learning, plus a seeded training
//! driver that records checkpoints.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, MeanField};
use crate::funcapprox::{FamilyError, QFamily, Theta};
use crate::linalg::{self, Matrix, Vector};
use crate::mdp::{BehaviorPolicy, ChainSample, ChainSimulator, FiniteMdp, MdpError, RandomizedPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgoError {
    #[error("GQ-learning requires a tabular or linear family")]
    NotLinearFamily,
    #[error("invalid step-size schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("family and MDP disagree on state/action counts")]
    Incompatible,
}

pub type Result<T> = std::result::Result<T, AlgoError>;

/// Step-size sequences `α_n` (slow) and `β_n` (fast), indexed from `n = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `α_n = gain / (n + n0)`, `β_n = (n + n0)^{-ρ}`.
    Diminishing { n0: u64, rho: f64, gain: f64 },
    /// `α_n ≡ alpha`, `β_n ≡ k_ratio · alpha`.
    Constant { alpha: f64, k_ratio: f64 },
}

impl StepSchedule {
    pub fn diminishing(n0: u64, rho: f64) -> Result<Self> {
        Self::scaled(1.0, n0, rho)
    }

    /// Diminishing schedule with `α_n = gain / (n + n0)`.
    pub fn scaled(gain: f64, n0: u64, rho: f64) -> Result<Self> {
        let s = StepSchedule::Diminishing { n0, rho, gain };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(alpha: f64, k_ratio: f64) -> Result<Self> {
        let s = StepSchedule::Constant { alpha, k_ratio };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Diminishing { n0, rho, gain } => {
                if n0 < 1 {
                    return Err(AlgoError::InvalidSchedule("n0 must be at least 1".into()));
                }
                if !(rho > 0.5 && rho < 1.0) {
                    return Err(AlgoError::InvalidSchedule(format!("rho {rho} outside (0.5, 1)")));
                }
                if !(gain >= 0.0 && gain.is_finite()) {
                    return Err(AlgoError::InvalidSchedule(format!("gain {gain} must be finite and nonnegative")));
                }
            }
            StepSchedule::Constant { alpha, k_ratio } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(AlgoError::InvalidSchedule(format!("alpha {alpha} must be positive")));
                }
                if !(k_ratio >= 1.0 && k_ratio.is_finite()) {
                    return Err(AlgoError::InvalidSchedule(format!("k_ratio {k_ratio} must be at least 1")));
                }
            }
        }
        Ok(())
    }

    pub fn alpha(&self, n: u64) -> f64 {
        match *self {
            StepSchedule::Diminishing { n0, gain, .. } => gain / (n + n0) as f64,
            StepSchedule::Constant { alpha, .. } => alpha,
        }
    }

    pub fn beta(&self, n: u64) -> f64 {
        match *self {
            StepSchedule::Diminishing { n0, rho, .. } => ((n + n0) as f64).powf(-rho),
            StepSchedule::Constant { alpha, k_ratio } => k_ratio * alpha,
        }
    }

    /// Whether `β_n / α_n → ∞`, i.e. the schedule separates time scales.
    /// For the diminishing schedule the ratio is `(n + n0)^{1-ρ} / gain`.
    pub fn separates_time_scales(&self) -> bool {
        match *self {
            StepSchedule::Diminishing { rho, .. } => rho < 1.0,
            StepSchedule::Constant { .. } => false,
        }
    }
}

/// Temporal difference pieces at one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdParts {
    /// `𝒟 = r(x,u) + c · max_u' Q^θ(x',u') − Q^θ(x,u)`.
    pub td: f64,
    /// Greedy action at `x'` (lowest index on ties).
    pub greedy_next: usize,
    /// Continuation factor `c`: `γ`, or `γ · 1{x' ∉ S}` when episodic.
    pub continuation: f64,
}

pub fn td_parts(mdp: &FiniteMdp, fam: &QFamily, theta: &Theta, s: &ChainSample, episodic: bool) -> TdParts {
    let continuation = if episodic { mdp.continuation(s.x_next) } else { mdp.gamma() };
    let (greedy_next, q_next) = fam.greedy_action_value(theta, s.x_next);
    let td = mdp.reward(s.x, s.u) + continuation * q_next - fam.q_value(theta, s.x, s.u);
    TdParts { td, greedy_next, continuation }
}

/// Temporal difference `𝒟(θ, Φ_{n+1})`.
pub fn td_error(mdp: &FiniteMdp, fam: &QFamily, theta: &Theta, s: &ChainSample, episodic: bool) -> f64 {
    td_parts(mdp, fam, theta, s, episodic).td
}

/// `f(θ, Φ) = 𝒟(θ, Φ) ζ`.
pub fn f_sample(mdp: &FiniteMdp, fam: &QFamily, theta: &Theta, zeta: &Vector, s: &ChainSample, episodic: bool) -> Vector {
    zeta * td_error(mdp, fam, theta, s, episodic)
}

/// The matrix `A_{n+1} = ζ [c ∇Q^θ(x', φ^θ(x')) − ζ]^T` as the pair
/// `(ζ, row)`, so that `A = ζ row^T`.
///
/// For tabular and linear families `ζ = ∇Q^θ(x,u)` and `∂_θ ζ = 0`, so this
/// is the exact derivative of `f`. For networks the eligibility is frozen at
/// its anchor and the `𝒟 ∂_θ ζ` term is dropped.
pub fn a_sample_factors(
    fam: &QFamily,
    theta: &Theta,
    zeta: &Vector,
    s: &ChainSample,
    parts: &TdParts,
) -> Vector {
    let mut row = fam.q_gradient(theta, s.x_next, parts.greedy_next);
    row *= parts.continuation;
    row -= zeta;
    row
}

/// Dense `A_{n+1}` at `θ` with eligibility `ζ`.
pub fn a_sample(mdp: &FiniteMdp, fam: &QFamily, theta: &Theta, zeta: &Vector, s: &ChainSample, episodic: bool) -> Matrix {
    let parts = td_parts(mdp, fam, theta, s, episodic);
    linalg::outer(zeta, &a_sample_factors(fam, theta, zeta, s, &parts))
}

/// Anchor schedule shared by the recursions: the anchor is refreshed to the
/// current parameter whenever the step count is a multiple of the period.
fn refresh_anchor(fam: &QFamily, anchor: &mut Theta, theta: &Theta, n: u64, period: u64) {
    if !fam.is_linear() && n.is_multiple_of(period) {
        anchor.copy_from(theta);
    }
}

/// State of the basic recursion `θ_{n+1} = θ_n + α_{n+1} 𝒟_{n+1} ζ_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WatkinsState {
    pub theta: Theta,
    pub anchor: Theta,
    pub n: u64,
    pub eligibility_period: u64,
}

impl WatkinsState {
    pub fn new(theta: Theta) -> Self {
        WatkinsState { anchor: theta.clone(), theta, n: 0, eligibility_period: 1 }
    }

    pub fn step(&mut self, mdp: &FiniteMdp, fam: &QFamily, s: &ChainSample, schedule: &StepSchedule, episodic: bool) {
        refresh_anchor(fam, &mut self.anchor, &self.theta, self.n, self.eligibility_period);
        let zeta = fam.eligibility(&self.anchor, s.x, s.u);
        let td = td_error(mdp, fam, &self.theta, s, episodic);
        self.n += 1;
        let alpha = schedule.alpha(self.n);
        self.theta.axpy(alpha * td, &zeta, 1.0);
    }
}

/// Two-time-scale GQ-learning state: slow `θ` and fast `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GqState {
    pub theta: Theta,
    pub phi: Vector,
    pub n: u64,
}

impl GqState {
    pub fn new(theta: Theta) -> Self {
        let d = theta.len();
        GqState { theta, phi: Vector::zeros(d), n: 0 }
    }

    /// Fast update of `φ` with `β_{n+1}`, then the slow update of `θ` with
    /// `α_{n+1}` using the updated `φ_{n+1}`.
    pub fn step(
        &mut self,
        mdp: &FiniteMdp,
        fam: &QFamily,
        s: &ChainSample,
        schedule: &StepSchedule,
        episodic: bool,
    ) -> Result<()> {
        if !fam.is_linear() {
            return Err(AlgoError::NotLinearFamily);
        }
        self.fast_step(mdp, fam, s, schedule, episodic);
        let parts = td_parts(mdp, fam, &self.theta, s, episodic);
        let zeta = fam.features(s.x, s.u).expect("linear family");
        let psi_next = fam.features(s.x_next, parts.greedy_next).expect("linear family");
        let alpha = schedule.alpha(self.n);
        let correction = parts.continuation * self.phi.dot(&zeta);
        self.theta.axpy(alpha * parts.td, &zeta, 1.0);
        self.theta.axpy(-alpha * correction, &psi_next, 1.0);
        Ok(())
    }

    /// Only the fast recursion `φ_{n+1} = φ_n + β ζ (𝒟 − ψ^T φ_n)`; advances
    /// the step counter.
    pub fn fast_step(&mut self, mdp: &FiniteMdp, fam: &QFamily, s: &ChainSample, schedule: &StepSchedule, episodic: bool) {
        let td = td_error(mdp, fam, &self.theta, s, episodic);
        let zeta = fam.features(s.x, s.u).expect("linear family");
        self.n += 1;
        let beta = schedule.beta(self.n);
        let innovation = td - zeta.dot(&self.phi);
        self.phi.axpy(beta * innovation, &zeta, 1.0);
    }
}

/// Learner state for the Zap recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct ZapState {
    pub theta: Theta,
    pub a_hat: Matrix,
    /// `zap_gain(Â, ε)` as of the last refresh.
    pub gain: Matrix,
    pub n: u64,
    pub gain_period: u64,
    pub eligibility_period: u64,
    pub anchor: Theta,
    pub eps: f64,
    /// Optional projection of `θ` onto a ball of this radius.
    pub projection_radius: Option<f64>,
    pub projections: u64,
}

impl ZapState {
    pub fn new(theta: Theta, a_hat: Matrix, eps: f64, gain_period: u64, eligibility_period: u64) -> Self {
        assert!(gain_period >= 1 && eligibility_period >= 1, "periods must be at least 1");
        let gain = linalg::zap_gain(&a_hat, eps);
        ZapState {
            anchor: theta.clone(),
            theta,
            a_hat,
            gain,
            n: 0,
            gain_period,
            eligibility_period,
            eps,
            projection_radius: None,
            projections: 0,
        }
    }

    pub fn with_projection(mut self, radius: Option<f64>) -> Self {
        self.projection_radius = radius;
        self
    }

    /// One Zap SA step from externally supplied samples `f(θ_n, Φ_{n+1})`
    /// and `A_{n+1}`.
    pub fn zap_sa_step(&mut self, f: &Vector, a: &Matrix, schedule: &StepSchedule) {
        self.n += 1;
        let beta = schedule.beta(self.n);
        self.a_hat *= 1.0 - beta;
        self.a_hat += a * beta;
        self.finish_step(f, schedule);
    }

    fn zap_sa_step_rank_one(&mut self, f: &Vector, left: &Vector, right: &Vector, schedule: &StepSchedule) {
        self.n += 1;
        let beta = schedule.beta(self.n);
        self.a_hat *= 1.0 - beta;
        self.a_hat.ger(beta, left, right, 1.0);
        self.finish_step(f, schedule);
    }

    fn finish_step(&mut self, f: &Vector, schedule: &StepSchedule) {
        if self.n.is_multiple_of(self.gain_period) {
            self.gain = linalg::zap_gain(&self.a_hat, self.eps);
        }
        let alpha = schedule.alpha(self.n);
        self.theta.gemv(alpha, &self.gain, f, 1.0);
        if let Some(radius) = self.projection_radius {
            let norm = self.theta.norm();
            if norm > radius {
                self.theta *= radius / norm;
                self.projections += 1;
            }
        }
    }

    /// One Zap Q-learning step.
    pub fn zap_q_step(&mut self, mdp: &FiniteMdp, fam: &QFamily, s: &ChainSample, schedule: &StepSchedule, episodic: bool) {
        refresh_anchor(fam, &mut self.anchor, &self.theta, self.n, self.eligibility_period);
        let zeta = fam.eligibility(&self.anchor, s.x, s.u);
        let parts = td_parts(mdp, fam, &self.theta, s, episodic);
        let row = a_sample_factors(fam, &self.theta, &zeta, s, &parts);
        let f = &zeta * parts.td;
        self.zap_sa_step_rank_one(&f, &zeta, &row, schedule);
    }
}

/// Which recursion to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Watkins,
    Gq,
    Zapq,
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "watkins" => Ok(Algorithm::Watkins),
            "gq" => Ok(Algorithm::Gq),
            "zapq" => Ok(Algorithm::Zapq),
            other => Err(format!("unknown algorithm {other:?}")),
        }
    }
}

/// Knobs shared by the recursions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub eps: f64,
    pub gain_period: u64,
    pub eligibility_period: u64,
    pub projection_radius: Option<f64>,
    /// Initial parameter; defaults to [`QFamily::initial_theta`].
    pub theta0: Option<Theta>,
    /// Number of samples averaged into `Â_0`; defaults to `max(d, 100)`.
    pub warmup: Option<usize>,
    /// Use the terminal-set indicator in the temporal difference; defaults
    /// to whether the MDP has a terminal set.
    pub episodic: Option<bool>,
    /// Compute exact `‖f̄(θ_n)‖` at checkpoints.
    pub track_fbar: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            eps: 1e-6,
            gain_period: 50,
            eligibility_period: 2000,
            projection_radius: Some(1e6),
            theta0: None,
            warmup: None,
            episodic: None,
            track_fbar: true,
        }
    }
}

/// One checkpoint of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnRecord {
    pub n: u64,
    pub theta: Theta,
    pub fbar_norm: Option<f64>,
    pub bellman_error: f64,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub records: Vec<LearnRecord>,
    pub theta0: Theta,
    pub final_theta: Theta,
    /// Number of steps at which the projection onto the ball activated.
    pub projections: u64,
}

/// Sup-norm Bellman error `‖Q^θ − 𝒯Q^θ‖∞`.
pub fn bellman_error(mdp: &FiniteMdp, fam: &QFamily, theta: &Theta) -> f64 {
    let q = fam.q_table(theta);
    (mdp.bellman(&q) - q).amax()
}

/// Stationary policy at which `f̄` is evaluated for a checkpoint: the
/// behavior policy itself, or the epsilon-soft policy frozen at `θ`.
pub fn evaluation_policy(fam: &QFamily, theta: &Theta, policy: &BehaviorPolicy) -> RandomizedPolicy {
    match policy {
        BehaviorPolicy::Randomized(p) => p.clone(),
        BehaviorPolicy::EpsilonGreedy { epsilon } => {
            RandomizedPolicy::epsilon_soft(&fam.greedy_policy(theta), fam.num_actions(), *epsilon)
        }
    }
}

/// RNG for run `seed`; stream 0 drives the chain, stream 1 initializes
/// parameters.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial matrix-gain estimate: the average of `warmup` A-samples at the
/// fixed parameter `theta0` (zero when `warmup == 0`).
pub fn warmup_a_hat(
    mdp: &FiniteMdp,
    fam: &QFamily,
    theta0: &Theta,
    sim: &mut ChainSimulator<'_>,
    warmup: usize,
    episodic: bool,
) -> Matrix {
    let d = fam.dim();
    let mut a0 = Matrix::zeros(d, d);
    for _ in 0..warmup {
        let s = sim.step_with(|x| fam.greedy_action(theta0, x));
        a0 += a_sample(mdp, fam, theta0, &fam.eligibility(theta0, s.x, s.u), &s, episodic);
    }
    if warmup > 0 {
        a0 /= warmup as f64;
    }
    a0
}

/// Runs one seeded training trajectory of `n_steps` and records
/// checkpoints at `n = 0`, every `checkpoint_every` steps and at the end.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    mdp: &FiniteMdp,
    fam: &QFamily,
    algo: Algorithm,
    policy: &BehaviorPolicy,
    schedule: &StepSchedule,
    seed: u64,
    n_steps: u64,
    checkpoint_every: u64,
    opts: &TrainOptions,
) -> Result<TrainingRun> {
    fam.validate()?;
    policy.validate(mdp)?;
    schedule.validate()?;
    if fam.num_states() != mdp.num_states() || fam.num_actions() != mdp.num_actions() {
        return Err(AlgoError::Incompatible);
    }
    if algo == Algorithm::Gq && !fam.is_linear() {
        return Err(AlgoError::NotLinearFamily);
    }
    if !(opts.eps > 0.0) || opts.gain_period == 0 || opts.eligibility_period == 0 {
        return Err(AlgoError::InvalidOptions("eps > 0 and periods >= 1 required".into()));
    }
    let episodic = opts.episodic.unwrap_or(mdp.is_episodic());
    let theta0 = match &opts.theta0 {
        Some(t) => {
            fam.check_theta(t)?;
            t.clone()
        }
        None => fam.initial_theta(&mut run_rng(seed, 1)),
    };

    let started = Instant::now();
    let record = |n: u64, theta: &Theta| -> Result<LearnRecord> {
        let fbar_norm = if opts.track_fbar {
            let p = evaluation_policy(fam, theta, policy);
            let mf = MeanField::new(mdp, fam, &p)?.with_episodic(episodic);
            Some(mf.fbar(theta).norm())
        } else {
            None
        };
        Ok(LearnRecord {
            n,
            theta: theta.clone(),
            fbar_norm,
            bellman_error: bellman_error(mdp, fam, theta),
            wall_clock: started.elapsed(),
        })
    };
    let due = |n: u64| (checkpoint_every > 0 && n.is_multiple_of(checkpoint_every)) || n == n_steps;

    let mut sim_rng = Some(run_rng(seed, 0));
    let mut records = vec![record(0, &theta0)?];
    let greedy_at = |theta: &Theta| {
        let theta = theta.clone();
        move |x: usize| fam.greedy_action(&theta, x)
    };

    let (final_theta, projections) = match algo {
        Algorithm::Watkins => {
            let mut st = WatkinsState::new(theta0.clone());
            st.eligibility_period = opts.eligibility_period;
            let mut sim = ChainSimulator::new(mdp, policy, sim_rng.take().unwrap(), greedy_at(&st.theta));
            while st.n < n_steps {
                let s = sim.step_with(|x| fam.greedy_action(&st.theta, x));
                st.step(mdp, fam, &s, schedule, episodic);
                if due(st.n) {
                    records.push(record(st.n, &st.theta)?);
                }
            }
            (st.theta, 0)
        }
        Algorithm::Gq => {
            let mut st = GqState::new(theta0.clone());
            let mut sim = ChainSimulator::new(mdp, policy, sim_rng.take().unwrap(), greedy_at(&st.theta));
            while st.n < n_steps {
                let s = sim.step_with(|x| fam.greedy_action(&st.theta, x));
                st.step(mdp, fam, &s, schedule, episodic)?;
                if due(st.n) {
                    records.push(record(st.n, &st.theta)?);
                }
            }
            (st.theta, 0)
        }
        Algorithm::Zapq => {
            let mut sim = ChainSimulator::new(mdp, policy, sim_rng.take().unwrap(), greedy_at(&theta0));
            let a0 = if n_steps > 0 {
                warmup_a_hat(mdp, fam, &theta0, &mut sim, opts.warmup.unwrap_or(fam.dim().max(100)), episodic)
            } else {
                Matrix::zeros(fam.dim(), fam.dim())
            };
            let mut st = ZapState::new(theta0.clone(), a0, opts.eps, opts.gain_period, opts.eligibility_period)
                .with_projection(opts.projection_radius);
            while st.n < n_steps {
                let s = sim.step_with(|x| fam.greedy_action(&st.theta, x));
                st.zap_q_step(mdp, fam, &s, schedule, episodic);
                if due(st.n) {
                    records.push(record(st.n, &st.theta)?);
                }
            }
            (st.theta, st.projections)
        }
    };
    Ok(TrainingRun { records, theta0, final_theta, projections })
}
