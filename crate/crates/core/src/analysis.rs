//! Exact and Monte-Carlo mean fields, their derivative matrices, asymptotic
//! covariance reports and the associated eigenvalue diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::funcapprox::{QFamily, Theta};
use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::mdp::{self, BehaviorPolicy, ChainSample, ChainSimulator, FiniteMdp, MdpError, RandomizedPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("A* is singular; the optimal covariance is undefined")]
    SingularAstar,
    #[error("epsilon {eps} must lie in (0, {limit}) = (0, λ_min(A^T A))")]
    EpsilonTooLarge { eps: f64, limit: f64 },
    #[error("operation requires a tabular family")]
    NotTabular,
    #[error("operation requires a tabular or linear family")]
    NotLinearFamily,
    #[error("family and MDP disagree on state/action counts")]
    Incompatible,
    #[error("at least two batches are required")]
    TooFewSamples,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Stationary-expectation view of the Q-learning update for a fixed MDP,
/// family and randomized policy.
#[derive(Debug, Clone)]
pub struct MeanField<'a> {
    mdp: &'a FiniteMdp,
    fam: &'a QFamily,
    policy: RandomizedPolicy,
    transition: Matrix,
    pmf: Vector,
    episodic: bool,
}

impl<'a> MeanField<'a> {
    pub fn new(mdp: &'a FiniteMdp, fam: &'a QFamily, policy: &RandomizedPolicy) -> Result<Self> {
        if fam.num_states() != mdp.num_states() || fam.num_actions() != mdp.num_actions() {
            return Err(AnalysisError::Incompatible);
        }
        let transition = mdp::joint_transition(mdp, policy)?;
        let pmf = mdp::stationary_of(&transition)?;
        Ok(MeanField {
            mdp,
            fam,
            policy: policy.clone(),
            transition,
            pmf,
            episodic: mdp.is_episodic(),
        })
    }

    /// Toggles the terminal-set indicator in the continuation term.
    pub fn with_episodic(mut self, episodic: bool) -> Self {
        self.episodic = episodic;
        self
    }

    pub fn mdp(&self) -> &FiniteMdp {
        self.mdp
    }

    pub fn family(&self) -> &QFamily {
        self.fam
    }

    pub fn policy(&self) -> &RandomizedPolicy {
        &self.policy
    }

    pub fn is_episodic(&self) -> bool {
        self.episodic
    }

    /// Invariant pmf `ϖ` of the joint chain, indexed by pair.
    pub fn pmf(&self) -> &Vector {
        &self.pmf
    }

    pub fn joint_transition(&self) -> &Matrix {
        &self.transition
    }

    fn continuation(&self, x_next: usize) -> f64 {
        if self.episodic {
            self.mdp.continuation(x_next)
        } else {
            self.mdp.gamma()
        }
    }

    /// `(greedy action, max value, gradient)` at every state.
    fn greedy_table(&self, theta: &Theta) -> Vec<(usize, f64, Vector)> {
        (0..self.mdp.num_states())
            .map(|x| {
                let (u, v) = self.fam.greedy_action_value(theta, x);
                (u, v, self.fam.q_gradient(theta, x, u))
            })
            .collect()
    }

    /// Exact `f̄(θ)`, with the eligibility evaluated at `θ` itself.
    pub fn fbar(&self, theta: &Theta) -> Vector {
        self.fbar_with_anchor(theta, theta)
    }

    /// Exact `f̄(θ)` with eligibility vectors `ζ = ∇Q^{anchor}`.
    pub fn fbar_with_anchor(&self, theta: &Theta, anchor: &Theta) -> Vector {
        let (nx, nu) = (self.mdp.num_states(), self.mdp.num_actions());
        let greedy = self.greedy_table(theta);
        let mut out = Vector::zeros(self.fam.dim());
        for x in 0..nx {
            for u in 0..nu {
                let w = self.pmf[self.mdp.pair_index(x, u)];
                if w == 0.0 {
                    continue;
                }
                let next: f64 = (0..nx)
                    .map(|xn| self.mdp.transition(x, u, xn) * self.continuation(xn) * greedy[xn].1)
                    .sum();
                let td = self.mdp.reward(x, u) + next - self.fam.q_value(theta, x, u);
                out.axpy(w * td, &self.fam.eligibility(anchor, x, u), 1.0);
            }
        }
        out
    }

    /// `A(θ) = E[ζ (c ∇Q^θ(X', φ^θ(X')) − ∇Q^θ(X,U))^T]`; the `𝒟 ∂ζ` term
    /// is omitted, which is exact for tabular and linear families.
    pub fn fbar_jacobian(&self, theta: &Theta) -> Matrix {
        let (nx, nu) = (self.mdp.num_states(), self.mdp.num_actions());
        let d = self.fam.dim();
        let greedy = self.greedy_table(theta);
        let mut out = Matrix::zeros(d, d);
        for x in 0..nx {
            for u in 0..nu {
                let w = self.pmf[self.mdp.pair_index(x, u)];
                if w == 0.0 {
                    continue;
                }
                let zeta = self.fam.q_gradient(theta, x, u);
                let mut row = -&zeta;
                for (xn, (_, _, grad)) in greedy.iter().enumerate() {
                    let p = self.mdp.transition(x, u, xn) * self.continuation(xn);
                    if p != 0.0 {
                        row.axpy(p, grad, 1.0);
                    }
                }
                out.ger(w, &zeta, &row, 1.0);
            }
        }
        out
    }

    /// Matrix form of the tabular mean field.
    pub fn tabular_form(&self) -> Result<TabularForm> {
        if !matches!(self.fam, QFamily::Tabular { .. }) {
            return Err(AnalysisError::NotTabular);
        }
        Ok(TabularForm::new(self.mdp, &self.pmf, self.episodic))
    }

    /// Reward-free field `f̄∞(θ) = E[ζ (c max_u Q^θ(X',u) − Q^θ(X,U))]`,
    /// the radial limit `m^{-1} f̄(mθ)` for linear families.
    pub fn fbar_at_infinity(&self, theta: &Theta) -> Result<Vector> {
        if !self.fam.is_linear() {
            return Err(AnalysisError::NotLinearFamily);
        }
        let b = self.fbar(&Vector::zeros(self.fam.dim()));
        Ok(self.fbar(theta) - b)
    }

    /// Stationary covariance `Σ_Δ` of the martingale-like noise
    /// `Δ = f(θ, Φ) − f̄(θ)` at `θ`, by the fundamental-matrix formula.
    /// Exact only when `f̄(θ) = 0`; otherwise the noise is centered first.
    pub fn noise_covariance(&self, theta: &Theta) -> Result<Matrix> {
        let greedy = self.greedy_table(theta);
        let mean = self.fbar(theta);
        let h = |s: &ChainSample| {
            let c = self.continuation(s.x_next);
            let td = self.mdp.reward(s.x, s.u) + c * greedy[s.x_next].1 - self.fam.q_value(theta, s.x, s.u);
            self.fam.eligibility(theta, s.x, s.u) * td - &mean
        };
        Ok(mdp::noise_covariance(self.mdp, &self.policy, h)?)
    }

    /// Batch-means Monte-Carlo estimate of `f̄(θ)` from a simulated chain:
    /// returns the mean and its per-coordinate standard error.
    pub fn fbar_monte_carlo(&self, theta: &Theta, num_samples: usize, batches: usize, seed: u64) -> Result<(Vector, Vector)> {
        if batches < 2 || num_samples < batches {
            return Err(AnalysisError::TooFewSamples);
        }
        let policy = BehaviorPolicy::Randomized(self.policy.clone());
        let mut sim = ChainSimulator::new(self.mdp, &policy, ChaCha8Rng::seed_from_u64(seed), |_| 0);
        let d = self.fam.dim();
        let per_batch = num_samples / batches;
        let greedy = self.greedy_table(theta);
        let mut means = Vec::with_capacity(batches);
        for _ in 0..batches {
            let mut acc = Vector::zeros(d);
            for _ in 0..per_batch {
                let s = sim.step();
                let c = self.continuation(s.x_next);
                let td = self.mdp.reward(s.x, s.u) + c * greedy[s.x_next].1 - self.fam.q_value(theta, s.x, s.u);
                acc.axpy(td, &self.fam.eligibility(theta, s.x, s.u), 1.0);
            }
            means.push(acc / per_batch as f64);
        }
        let b = batches as f64;
        let mean = means.iter().fold(Vector::zeros(d), |a, m| a + m) / b;
        let var = means
            .iter()
            .fold(Vector::zeros(d), |a, m| a + (m - &mean).map(|v| v * v))
            / (b - 1.0);
        Ok((mean, var.map(|v| (v / b).sqrt())))
    }
}

/// Tabular matrices: `Π = diag(ϖ)`, the `d × ℓx` transition matrix `P`
/// and the per-state continuation factors.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularForm {
    pub pi: Matrix,
    pub p: Matrix,
    pub continuation: Vector,
    pub rewards: Vector,
    num_actions: usize,
}

impl TabularForm {
    fn new(mdp: &FiniteMdp, pmf: &Vector, episodic: bool) -> Self {
        let (nx, nu) = (mdp.num_states(), mdp.num_actions());
        let p = Matrix::from_fn(nx * nu, nx, |z, xn| mdp.transition(z / nu, z % nu, xn));
        let continuation = Vector::from_fn(nx, |x, _| if episodic { mdp.continuation(x) } else { mdp.gamma() });
        let rewards = Vector::from_fn(nx * nu, |z, _| mdp.reward(z / nu, z % nu));
        TabularForm { pi: Matrix::from_diagonal(pmf), p, continuation, rewards, num_actions: nu }
    }

    /// Selector `S_φ` with `(S_φ θ)(x) = θ(x, φ(x))`.
    pub fn selector(&self, policy: &[usize]) -> Matrix {
        let mut s = Matrix::zeros(policy.len(), self.p.nrows());
        for (x, u) in policy.iter().enumerate() {
            s[(x, x * self.num_actions + u)] = 1.0;
        }
        s
    }

    /// `γ P S_φ − I`, with `γ` replaced by the per-state continuation.
    pub fn normalized_a(&self, policy: &[usize]) -> Matrix {
        let d = self.p.nrows();
        &self.p * Matrix::from_diagonal(&self.continuation) * self.selector(policy) - Matrix::identity(d, d)
    }

    /// `A(φ) = Π [γ P S_φ − I]`.
    pub fn a(&self, policy: &[usize]) -> Matrix {
        &self.pi * self.normalized_a(policy)
    }

    /// `f̄(θ) = Π r + A(φ^θ) θ`, with `φ^θ` the greedy policy of `θ`.
    pub fn fbar(&self, theta: &Theta) -> Vector {
        let q = Matrix::from_fn(self.p.ncols(), self.num_actions, |x, u| theta[x * self.num_actions + u]);
        let policy = mdp::greedy_of_table(&q);
        &self.pi * &self.rewards + self.a(&policy) * theta
    }
}

/// Asymptotic covariance of an SA recursion with matrix gain `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub a_star: Matrix,
    pub sigma_delta: Matrix,
    pub gain: Matrix,
    /// `None` when `½I + G A*` is not Hurwitz.
    pub sigma_theta: Option<Matrix>,
    /// Real parts of the eigenvalues of `½I + G A*`, descending.
    pub eig_real_parts: Vec<f64>,
    /// `Σ* = A*^{-1} Σ_Δ A*^{-T}`.
    pub sigma_optimal: Matrix,
    /// `Σ_θ^G − Σ*`, when `Σ_θ^G` is finite.
    pub gap: Option<Matrix>,
}

impl CovarianceReport {
    pub fn is_finite(&self) -> bool {
        self.sigma_theta.is_some()
    }

    /// Eigenvalues of `½I + G A*` with nonnegative real part.
    pub fn offending_eigenvalues(&self) -> Vec<f64> {
        self.eig_real_parts.iter().copied().filter(|v| *v >= 0.0).collect()
    }

    pub fn to_json_value(&self) -> Value {
        let m = |a: &Matrix| Value::from(matrix_rows(a));
        json!({
            "A_star": m(&self.a_star),
            "Sigma_Delta": m(&self.sigma_delta),
            "gain": m(&self.gain),
            "Sigma_theta": self.sigma_theta.as_ref().map_or(Value::from("infinite"), m),
            "eig_real_parts": self.eig_real_parts,
            "gap": self.gap.as_ref().map_or(Value::Null, m),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("report serializes")
    }
}

/// Row-major nested vectors of a matrix.
pub fn matrix_rows(a: &Matrix) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Matrix from nested rows; `None` on ragged input.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Option<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn square_check(a: &Matrix, s: &Matrix, g: &Matrix) -> Result<()> {
    let d = a.nrows();
    for m in [a, s, g] {
        if m.nrows() != d || m.ncols() != d {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{d}x{d}"),
                got: format!("{}x{}", m.nrows(), m.ncols()),
            }
            .into());
        }
    }
    Ok(())
}

/// Builds a [`CovarianceReport`] for gain `G`.
pub fn asymptotic_covariance(a_star: &Matrix, sigma_delta: &Matrix, gain: &Matrix) -> Result<CovarianceReport> {
    square_check(a_star, sigma_delta, gain)?;
    let d = a_star.nrows();
    let a_inv = linalg::inverse(a_star).map_err(|_| AnalysisError::SingularAstar)?;
    let sigma_optimal = linalg::symmetrize(&(&a_inv * sigma_delta * a_inv.transpose()));
    let shifted = Matrix::identity(d, d) * 0.5 + gain * a_star;
    let eig_real_parts = linalg::eig_real_parts(&shifted)?;
    let hurwitz = eig_real_parts.first().is_none_or(|v| *v < 0.0);
    let (sigma_theta, gap) = if hurwitz {
        let source = gain * sigma_delta * gain.transpose();
        let sigma = linalg::solve_lyapunov(&shifted, &linalg::symmetrize(&source))?;
        let mismatch = gain + &a_inv;
        let gap_source = &mismatch * sigma_delta * mismatch.transpose();
        let gap = linalg::solve_lyapunov(&shifted, &linalg::symmetrize(&gap_source))?;
        (Some(sigma), Some(gap))
    } else {
        (None, None)
    };
    Ok(CovarianceReport {
        a_star: a_star.clone(),
        sigma_delta: sigma_delta.clone(),
        gain: gain.clone(),
        sigma_theta,
        eig_real_parts,
        sigma_optimal,
        gap,
    })
}

/// One regularization level of the Zap covariance expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonReport {
    pub eps: f64,
    pub gain: Matrix,
    /// Eigenvalues of `½I + G_ε A*`, real parts descending.
    pub eig_real_parts: Vec<f64>,
    /// Largest absolute imaginary part among those eigenvalues.
    pub max_imag: f64,
    pub sigma: Matrix,
    /// `R(ε) = Σ^ε − Σ* − ε² Σ^{(2)}`.
    pub remainder: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonExpansion {
    pub sigma_optimal: Matrix,
    pub sigma_second: Matrix,
    pub reports: Vec<EpsilonReport>,
    /// Least-squares slope of `log ‖R(ε)‖_F` against `log ε`; `None` with
    /// fewer than two levels or a vanishing remainder.
    pub fitted_order: Option<f64>,
}

/// Covariance of Zap SA with gain `G_ε = −(εI + A*^T A*)^{-1} A*^T` for each
/// `ε`, compared against its second-order expansion around `ε = 0`.
pub fn zap_epsilon_expansion(a_star: &Matrix, sigma_delta: &Matrix, eps_list: &[f64]) -> Result<EpsilonExpansion> {
    square_check(a_star, sigma_delta, a_star)?;
    let d = a_star.nrows();
    let ata = a_star.transpose() * a_star;
    let limit = linalg::symmetric_eigenvalues(&ata)?.first().copied().unwrap_or(0.0);
    let a_inv = linalg::inverse(a_star).map_err(|_| AnalysisError::SingularAstar)?;
    let sigma_optimal = linalg::symmetrize(&(&a_inv * sigma_delta * a_inv.transpose()));
    let left = linalg::inverse(&(a_star * a_star.transpose() * a_star)).map_err(|_| AnalysisError::SingularAstar)?;
    let sigma_second = linalg::symmetrize(&(&left * sigma_delta * left.transpose()));

    let mut reports = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if !(eps > 0.0 && eps < limit) {
            return Err(AnalysisError::EpsilonTooLarge { eps, limit });
        }
        let gain = linalg::zap_gain(a_star, eps);
        let shifted = Matrix::identity(d, d) * 0.5 + &gain * a_star;
        let eig = linalg::eigenvalues(&shifted)?;
        let max_imag = eig.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        let mut eig_real_parts: Vec<f64> = eig.iter().map(|c| c.re).collect();
        eig_real_parts.sort_by(|a, b| b.total_cmp(a));
        let source = linalg::symmetrize(&(&gain * sigma_delta * gain.transpose()));
        let sigma = linalg::solve_lyapunov_with_tol(&shifted, &source, 1e-13)?;
        let remainder = &sigma - &sigma_optimal - &sigma_second * (eps * eps);
        reports.push(EpsilonReport { eps, gain, eig_real_parts, max_imag, sigma, remainder });
    }
    let points: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| (r.eps.ln(), r.remainder.norm().ln()))
        .filter(|(_, y)| y.is_finite())
        .collect();
    let fitted_order = (points.len() >= 2).then(|| {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    Ok(EpsilonExpansion { sigma_optimal, sigma_second, reports, fitted_order })
}

/// Linearization of GQ-learning around `θ*` for the tabular basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GqLinearization {
    /// `A_GQ = −H^T H` with `H = Π^{1/2} [I − γ P S_{φ*}]`.
    pub a_gq: Matrix,
    pub lambda_max: f64,
    /// `−(1 − γ)²`.
    pub bound: f64,
    pub bound_holds: bool,
}

pub fn gq_linearization(mdp: &FiniteMdp, policy: &RandomizedPolicy) -> Result<GqLinearization> {
    let fam = QFamily::tabular(mdp.num_states(), mdp.num_actions());
    let mf = MeanField::new(mdp, &fam, policy)?;
    let tab = mf.tabular_form()?;
    let phi_star = mdp::greedy_of_table(&mdp::q_star(mdp, 1e-12)?);
    let h = tab.pi.map(f64::sqrt) * -tab.normalized_a(&phi_star);
    let a_gq = -(h.transpose() * &h);
    let lambda_max = linalg::symmetric_eigenvalues(&a_gq)?.last().copied().unwrap_or(0.0);
    let gamma = mdp.gamma();
    let bound = -(1.0 - gamma).powi(2);
    Ok(GqLinearization { a_gq, lambda_max, bound, bound_holds: lambda_max >= bound - 1e-10 })
}

/// Lower bound on `sup_{‖v‖≤1} max_i [Â v − (f̄(θ+v) − f̄(θ))]_i`, clipped
/// at zero. Probes are the coordinate directions `±e_i` followed by uniform
/// draws from the unit ball, `num_probes` in total.
pub fn dist_n_estimate(mf: &MeanField<'_>, a_hat: &Matrix, theta: &Theta, num_probes: usize, seed: u64) -> Result<f64> {
    if !mf.family().is_linear() {
        return Err(AnalysisError::NotLinearFamily);
    }
    let d = theta.len();
    let base = mf.fbar(theta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for k in 0..num_probes {
        let v = if k < 2 * d {
            let mut e = Vector::zeros(d);
            e[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
            e
        } else {
            unit_ball_sample(&mut rng, d)
        };
        let gap = a_hat * &v - (mf.fbar(&(theta + &v)) - &base);
        best = best.max(gap.max());
    }
    Ok(best)
}

fn unit_ball_sample(rng: &mut impl Rng, d: usize) -> Vector {
    use rand_distr::{Distribution, StandardNormal};
    let g = Vector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let radius = rng.random::<f64>().powf(1.0 / d as f64);
    g.normalize() * radius
}

/// Eigenvalue test for Watkins' recursion with `α_n = g/(n + n₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WatkinsRateReport {
    /// `γ P S_{φ*} − I` with visits normalized out.
    pub a_star: Matrix,
    /// Real parts of `½I + g A*`, descending.
    pub eig_real_parts: Vec<f64>,
    /// Whether every real part is negative.
    pub clt_rate_holds: bool,
}

/// Reports the spectrum of `½I + g A(θ*)` where `A(θ*) = γ P S_{φ*} − I` is
/// the per-visit linearization at `Q*`.
pub fn watkins_rate_probe(mdp: &FiniteMdp, gamma: f64, g: f64) -> Result<WatkinsRateReport> {
    let mdp = mdp.with_gamma(gamma)?;
    let nu = mdp.num_actions();
    let phi_star = mdp::greedy_of_table(&mdp::q_star(&mdp, 1e-12)?);
    let nx = mdp.num_states();
    let d = nx * nu;
    let a_star = Matrix::from_fn(d, d, |z, w| {
        let (xn, un) = (w / nu, w % nu);
        let p = if phi_star[xn] == un { mdp.transition(z / nu, z % nu, xn) * mdp.continuation(xn) } else { 0.0 };
        p - if z == w { 1.0 } else { 0.0 }
    });
    let shifted = Matrix::identity(d, d) * 0.5 + &a_star * g;
    let eig_real_parts = linalg::eig_real_parts(&shifted)?;
    let clt_rate_holds = eig_real_parts.iter().all(|v| *v < 0.0);
    Ok(WatkinsRateReport { a_star, eig_real_parts, clt_rate_holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcapprox::LinearBasis;
    use crate::mdp::fixtures;
    use approx::assert_abs_diff_eq;

    fn qstar_theta(mdp: &FiniteMdp) -> Theta {
        let q = mdp::q_star(mdp, 1e-13).unwrap();
        Vector::from_column_slice(q.transpose().as_slice())
    }

    #[test]
    fn fbar_vanishes_at_qstar_and_jacobian_matches_matrix_form() {
        let mdp = fixtures::random_mdp(11, 4, 2, 0.8);
        let fam = QFamily::tabular(4, 2);
        let policy = RandomizedPolicy::uniform(4, 2);
        let mf = MeanField::new(&mdp, &fam, &policy).unwrap();
        let theta = qstar_theta(&mdp);
        assert!(mf.fbar(&theta).amax() <= 1e-12);
        let tab = mf.tabular_form().unwrap();
        let phi = fam.greedy_policy(&theta);
        assert_abs_diff_eq!(mf.fbar_jacobian(&theta), tab.a(&phi), epsilon = 1e-12);
    }

    #[test]
    fn tabular_fbar_matches_matrix_form() {
        let mdp = fixtures::random_mdp(12, 5, 3, 0.9);
        let fam = QFamily::tabular(5, 3);
        let policy = RandomizedPolicy::uniform(5, 3);
        let mf = MeanField::new(&mdp, &fam, &policy).unwrap();
        let tab = mf.tabular_form().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let theta = Vector::from_fn(15, |_, _| rng.random_range(-5.0..5.0));
            assert_abs_diff_eq!(mf.fbar(&theta), tab.fbar(&theta), epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_zero_jacobian_is_minus_pi() {
        let mdp = fixtures::random_mdp(13, 3, 2, 0.0);
        let fam = QFamily::tabular(3, 2);
        let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(3, 2)).unwrap();
        let j = mf.fbar_jacobian(&Vector::from_element(6, 0.3));
        assert_abs_diff_eq!(j, -Matrix::from_diagonal(mf.pmf()), epsilon = 1e-15);
    }

    #[test]
    fn linear_jacobian_matches_finite_differences() {
        let mdp = fixtures::random_mdp(14, 4, 2, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let fam = QFamily::Linear(LinearBasis::new(4, 2, 3, feats).unwrap());
        let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(4, 2)).unwrap();
        let theta = Vector::from_vec(vec![0.7, -0.4, 1.3]);
        let j = mf.fbar_jacobian(&theta);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vector::zeros(3);
            e[k] = h;
            let fd = (mf.fbar(&(&theta + &e)) - mf.fbar(&(&theta - &e))) / (2.0 * h);
            let col = j.column(k).into_owned();
            assert!((&fd - &col).norm() <= 1e-6 * col.norm().max(1e-12));
        }
    }

    #[test]
    fn fbar_monte_carlo_agrees_with_exact() {
        let mdp = fixtures::random_mdp(15, 3, 2, 0.8);
        let fam = QFamily::tabular(3, 2);
        let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(3, 2)).unwrap();
        let theta = Vector::from_vec(vec![1.0, 0.5, -0.2, 0.3, 2.0, 0.0]);
        let exact = mf.fbar(&theta);
        let (mc, se) = mf.fbar_monte_carlo(&theta, 1_000_000, 100, 9).unwrap();
        for i in 0..6 {
            assert!((mc[i] - exact[i]).abs() <= 3.0 * se[i], "coordinate {i}: {} vs {} (se {})", mc[i], exact[i], se[i]);
        }
    }

    #[test]
    fn covariance_scalar_examples() {
        let a = Matrix::from_element(1, 1, -1.0);
        let s = Matrix::from_element(1, 1, 1.0);
        let r = asymptotic_covariance(&a, &s, &Matrix::from_element(1, 1, 1.0)).unwrap();
        assert_abs_diff_eq!(r.sigma_theta.clone().unwrap()[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.sigma_optimal[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.gap.clone().unwrap()[(0, 0)], 0.0, epsilon = 1e-14);

        let r = asymptotic_covariance(&a, &s, &Matrix::from_element(1, 1, 0.4)).unwrap();
        assert!(!r.is_finite());
        assert_abs_diff_eq!(r.offending_eigenvalues()[0], 0.1, epsilon = 1e-14);
        let v = r.to_json_value();
        assert_eq!(v["Sigma_theta"], "infinite");
        assert!(v["gap"].is_null());
    }

    #[test]
    fn singular_astar_rejected() {
        let z = Matrix::zeros(2, 2);
        assert_eq!(asymptotic_covariance(&z, &z, &z).unwrap_err(), AnalysisError::SingularAstar);
    }

    fn random_hurwitz(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let m = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let shift = linalg::eig_real_parts(&m).unwrap()[0].max(0.0) + 0.5;
        m - Matrix::identity(d, d) * shift
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose()
    }

    #[test]
    fn newton_gain_has_zero_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_hurwitz(&mut rng, 3);
            let s = random_psd(&mut rng, 3);
            let g = -linalg::inverse(&a).unwrap();
            let r = asymptotic_covariance(&a, &s, &g).unwrap();
            assert!(r.gap.unwrap().amax() <= 1e-10);
        }
    }

    #[test]
    fn epsilon_expansion_scalar_closed_form() {
        let a = Matrix::from_element(1, 1, -1.0);
        let s = Matrix::from_element(1, 1, 1.0);
        let eps = [1e-1, 5e-2, 2.5e-2];
        let e = zap_epsilon_expansion(&a, &s, &eps).unwrap();
        assert_abs_diff_eq!(e.sigma_second[(0, 0)], 1.0, epsilon = 1e-15);
        for r in &e.reports {
            assert_abs_diff_eq!(r.sigma[(0, 0)], 1.0 / (1.0 - r.eps * r.eps), epsilon = 1e-12);
        }
        assert!((e.fitted_order.unwrap() - 4.0).abs() < 0.05);
        let tiny = zap_epsilon_expansion(&a, &s, &[1e-6]).unwrap();
        assert!((&tiny.reports[0].sigma - &tiny.sigma_optimal).amax() <= 1e-8);
        assert!(matches!(
            zap_epsilon_expansion(&a, &s, &[1.5]),
            Err(AnalysisError::EpsilonTooLarge { .. })
        ));
    }

    #[test]
    fn epsilon_expansion_eigenvalues_real_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = random_hurwitz(&mut rng, 3);
            let s = random_psd(&mut rng, 3);
            let limit = linalg::symmetric_eigenvalues(&(a.transpose() * &a)).unwrap()[0];
            let e = zap_epsilon_expansion(&a, &s, &[0.5 * limit, 0.1 * limit]).unwrap();
            for r in &e.reports {
                assert!(r.max_imag <= 1e-8);
                assert!(r.eig_real_parts[0] < 0.0);
            }
        }
    }

    #[test]
    fn gq_bound_examples() {
        let one = fixtures::one_state(1.0, 0.9);
        let r = gq_linearization(&one, &RandomizedPolicy::uniform(1, 1)).unwrap();
        assert_abs_diff_eq!(r.a_gq[(0, 0)], -0.01, epsilon = 1e-14);
        assert!(r.bound_holds);

        let mdp = fixtures::random_mdp(21, 4, 2, 0.9);
        let r = gq_linearization(&mdp, &RandomizedPolicy::uniform(4, 2)).unwrap();
        assert!(r.lambda_max >= -0.01 - 1e-10);
        let close = gq_linearization(&mdp.with_gamma(0.999).unwrap(), &RandomizedPolicy::uniform(4, 2)).unwrap();
        assert!(close.lambda_max < 0.0 && close.lambda_max >= -1e-6 - 1e-10);
    }

    #[test]
    fn dist_n_examples() {
        let mdp = fixtures::random_mdp(22, 3, 2, 0.9);
        let fam = QFamily::tabular(3, 2);
        let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(3, 2)).unwrap();
        let theta = Vector::from_vec(vec![0.2, 0.1, -0.3, 0.4, 1.0, 1.0]);
        let j = mf.fbar_jacobian(&theta);
        assert!(dist_n_estimate(&mf, &j, &theta, 2000, 1).unwrap() <= 1e-10);
        let perturbed = &j + Matrix::identity(6, 6);
        assert!(dist_n_estimate(&mf, &perturbed, &theta, 100, 1).unwrap() > 0.0);
        assert_eq!(dist_n_estimate(&mf, &perturbed, &theta, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn watkins_probe_examples() {
        let mdp = fixtures::six_state(0.9);
        assert!(!watkins_rate_probe(&mdp, 0.99, 1.0).unwrap().clt_rate_holds);
        assert!(watkins_rate_probe(&mdp, 0.5, 2.0).unwrap().clt_rate_holds);
        assert!(watkins_rate_probe(&mdp, 0.99, 1e4).unwrap().clt_rate_holds);
    }

    #[test]
    fn field_at_infinity_radially_linear() {
        let mdp = fixtures::random_mdp(23, 3, 2, 0.9);
        let fam = QFamily::tabular(3, 2);
        let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(3, 2)).unwrap();
        let theta = Vector::from_vec(vec![0.2, -1.1, 0.3, 0.7, -0.5, 0.9]);
        let base = mf.fbar_at_infinity(&theta).unwrap();
        for m in [0.5, 2.0, 10.0] {
            let scaled = mf.fbar_at_infinity(&(&theta * m)).unwrap();
            assert!((scaled - &base * m).amax() <= 1e-12 * (1.0 + m));
        }
    }

    #[test]
    fn noise_covariance_at_qstar_is_psd() {
        let mdp = fixtures::random_mdp(24, 3, 2, 0.8);
        let fam = QFamily::tabular(3, 2);
        let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(3, 2)).unwrap();
        let s = mf.noise_covariance(&qstar_theta(&mdp)).unwrap();
        assert!(linalg::asymmetry(&s) <= 1e-12);
        assert!(linalg::symmetric_eigenvalues(&s).unwrap()[0] >= -1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn gap_is_psd_and_matches_difference(seed in 0u64..10_000, scale in 0.2f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_hurwitz(&mut rng, 3);
                let s = random_psd(&mut rng, 3) + Matrix::identity(3, 3) * 0.1;
                let g = -linalg::inverse(&a).unwrap() * scale;
                let r = asymptotic_covariance(&a, &s, &g).unwrap();
                if let (Some(sig), Some(gap)) = (&r.sigma_theta, &r.gap) {
                    let diff = sig - &r.sigma_optimal;
                    prop_assert!((&diff - gap).amax() <= 1e-8 * (1.0 + sig.amax()));
                    prop_assert!(linalg::symmetric_eigenvalues(gap).unwrap()[0] >= -1e-8 * (1.0 + gap.amax()));
                }
            }

            #[test]
            fn exact_fbar_linear_in_rewards(seed in 0u64..1000, c in -3.0f64..3.0) {
                let mdp = fixtures::random_mdp(seed, 3, 2, 0.7);
                let fam = QFamily::tabular(3, 2);
                let policy = RandomizedPolicy::uniform(3, 2);
                let mf = MeanField::new(&mdp, &fam, &policy).unwrap();
                let theta = Vector::from_fn(6, |i, _| (i as f64 * 0.37 + c).sin());
                let a = mf.fbar_jacobian(&theta);
                let b = mf.fbar(&Vector::zeros(6));
                let tab = mf.tabular_form().unwrap();
                prop_assert!((&tab.pi * &tab.rewards - &b).amax() <= 1e-12);
                prop_assert!((mf.fbar(&theta) - (b + a * &theta)).amax() <= 1e-12);
            }
        }
    }
}
