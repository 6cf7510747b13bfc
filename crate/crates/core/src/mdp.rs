//! Finite Markov decision processes: the model, behavior policies, chain
//! simulation and the exact oracles computed from the model (stationary law,
//! optimal Q-function, noise covariance).

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, Vector};

pub mod fixtures;

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-12;
const CENTERING_TOL: f64 = 1e-8;
const DEFAULT_VI_CAP: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("joint state-action chain is not irreducible (unit eigenvalue multiplicity {multiplicity})")]
    NotIrreducible { multiplicity: usize },
    #[error("value iteration did not converge within {iterations} iterations (residual {residual})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("function is not centered under the stationary law: |E h| = {norm}")]
    NotCentered { norm: f64 },
    #[error("epsilon-greedy simulation requires a greedy-action callback")]
    MissingGreedyCallback,
    #[error("MDP file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MdpError>;

/// A finite MDP with per-action transition kernels, a reward table, a
/// discount factor and an optional terminal set.
///
/// When the terminal set is nonempty the model is episodic: the continuation
/// value is multiplied by `1{x' ∉ S}` and trajectories restart from the
/// initial distribution upon reaching `S` (or after `horizon_cap` steps).
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    kernels: Vec<Matrix>,
    rewards: Matrix,
    gamma: f64,
    terminal: BTreeSet<usize>,
    horizon_cap: Option<u64>,
    initial: Option<Vec<f64>>,
}

impl FiniteMdp {
    pub fn new(kernels: Vec<Matrix>, rewards: Matrix, gamma: f64) -> Result<Self> {
        let mdp = FiniteMdp {
            num_states: rewards.nrows(),
            num_actions: rewards.ncols(),
            kernels,
            rewards,
            gamma,
            terminal: BTreeSet::new(),
            horizon_cap: None,
            initial: None,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn with_terminal(mut self, terminal: impl IntoIterator<Item = usize>) -> Result<Self> {
        self.terminal = terminal.into_iter().collect();
        self.validate()?;
        Ok(self)
    }

    pub fn with_horizon_cap(mut self, cap: Option<u64>) -> Result<Self> {
        self.horizon_cap = cap;
        self.validate()?;
        Ok(self)
    }

    /// Sets the restart distribution over states. Defaults to uniform over
    /// non-terminal states.
    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        self.initial = Some(initial);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let nx = self.num_states;
        let nu = self.num_actions;
        if nx == 0 || nu == 0 {
            return Err(MdpError::Invalid("need at least one state and one action".into()));
        }
        if self.kernels.len() != nu {
            return Err(MdpError::Invalid(format!(
                "expected {nu} transition kernels, got {}",
                self.kernels.len()
            )));
        }
        for (u, p) in self.kernels.iter().enumerate() {
            if p.nrows() != nx || p.ncols() != nx {
                return Err(MdpError::Invalid(format!("kernel {u} must be {nx}x{nx}")));
            }
            for x in 0..nx {
                let row = p.row(x);
                if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(MdpError::Invalid(format!("kernel {u} row {x} has invalid entries")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MdpError::Invalid(format!("kernel {u} row {x} sums to {s}")));
                }
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(MdpError::Invalid("rewards must be finite".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(MdpError::Invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.terminal.is_empty() && self.gamma >= 1.0 {
            return Err(MdpError::Invalid("gamma < 1 required without a terminal set".into()));
        }
        if let Some(&x) = self.terminal.iter().find(|&&x| x >= nx) {
            return Err(MdpError::Invalid(format!("terminal state {x} out of range")));
        }
        if self.horizon_cap == Some(0) {
            return Err(MdpError::Invalid("horizon_cap must be at least 1".into()));
        }
        if let Some(init) = &self.initial {
            if init.len() != nx || init.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(MdpError::Invalid("initial distribution malformed".into()));
            }
            let s: f64 = init.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::Invalid(format!("initial distribution sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of state-action pairs; pair `(x, u)` has index `x * num_actions + u`.
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn pair_index(&self, x: usize, u: usize) -> usize {
        x * self.num_actions + u
    }

    pub fn kernel(&self, u: usize) -> &Matrix {
        &self.kernels[u]
    }

    pub fn kernels(&self) -> &[Matrix] {
        &self.kernels
    }

    pub fn transition(&self, x: usize, u: usize, x_next: usize) -> f64 {
        self.kernels[u][(x, x_next)]
    }

    pub fn reward(&self, x: usize, u: usize) -> f64 {
        self.rewards[(x, u)]
    }

    pub fn rewards(&self) -> &Matrix {
        &self.rewards
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn terminal(&self) -> &BTreeSet<usize> {
        &self.terminal
    }

    pub fn is_terminal(&self, x: usize) -> bool {
        self.terminal.contains(&x)
    }

    pub fn is_episodic(&self) -> bool {
        !self.terminal.is_empty()
    }

    pub fn horizon_cap(&self) -> Option<u64> {
        self.horizon_cap
    }

    /// Multiplier on the continuation value after landing in `x_next`:
    /// `γ · 1{x_next ∉ S}`.
    pub fn continuation(&self, x_next: usize) -> f64 {
        if self.is_terminal(x_next) {
            0.0
        } else {
            self.gamma
        }
    }

    /// Restart distribution over states.
    pub fn initial_distribution(&self) -> Vec<f64> {
        if let Some(init) = &self.initial {
            return init.clone();
        }
        let live = self.num_states - self.terminal.len();
        if live == 0 {
            return vec![1.0 / self.num_states as f64; self.num_states];
        }
        (0..self.num_states)
            .map(|x| if self.is_terminal(x) { 0.0 } else { 1.0 / live as f64 })
            .collect()
    }

    /// Same dynamics with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut m = self.clone();
        m.gamma = gamma;
        m.validate()?;
        Ok(m)
    }

    /// Bellman operator: `r + γ Σ_{x'} P_u(x,x') 1{x'∉S} max_u' Q(x',u')`.
    pub fn bellman(&self, q: &Matrix) -> Matrix {
        let v = max_per_row(q);
        let mut out = self.rewards.clone();
        for u in 0..self.num_actions {
            let p = &self.kernels[u];
            for x in 0..self.num_states {
                let mut cont = 0.0;
                for xn in 0..self.num_states {
                    let pr = p[(x, xn)];
                    if pr != 0.0 && !self.is_terminal(xn) {
                        cont += pr * v[xn];
                    }
                }
                out[(x, u)] += self.gamma * cont;
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| MdpError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml_string())
            .map_err(|e| MdpError::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: MdpFile = toml::from_str(text).map_err(|e| MdpError::Format(e.to_string()))?;
        file.into_mdp()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&MdpFile::from_mdp(self)).expect("MDP file serialization cannot fail")
    }
}

fn max_per_row(q: &Matrix) -> Vec<f64> {
    q.row_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum HorizonSpec {
    Steps(u64),
    Word(String),
}

/// On-disk MDP description. Matrices are flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    terminal: Vec<usize>,
    horizon_cap: HorizonSpec,
    rewards: Vec<f64>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<Vec<f64>>,
}

impl MdpFile {
    fn from_mdp(mdp: &FiniteMdp) -> Self {
        let row_major = |m: &Matrix| -> Vec<f64> { m.transpose().as_slice().to_vec() };
        MdpFile {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            gamma: mdp.gamma,
            terminal: mdp.terminal.iter().copied().collect(),
            horizon_cap: match mdp.horizon_cap {
                Some(n) => HorizonSpec::Steps(n),
                None => HorizonSpec::Word("inf".into()),
            },
            rewards: row_major(&mdp.rewards),
            p: mdp.kernels.iter().map(row_major).collect(),
            initial: mdp.initial.clone(),
        }
    }

    fn into_mdp(self) -> Result<FiniteMdp> {
        let (nx, nu) = (self.num_states, self.num_actions);
        if self.rewards.len() != nx * nu {
            return Err(MdpError::Format(format!(
                "rewards has {} entries, expected {}",
                self.rewards.len(),
                nx * nu
            )));
        }
        if self.p.len() != nu {
            return Err(MdpError::Format(format!("P has {} matrices, expected {nu}", self.p.len())));
        }
        let mut kernels = Vec::with_capacity(nu);
        for (u, flat) in self.p.iter().enumerate() {
            if flat.len() != nx * nx {
                return Err(MdpError::Format(format!("P[{u}] has {} entries, expected {}", flat.len(), nx * nx)));
            }
            kernels.push(Matrix::from_row_slice(nx, nx, flat));
        }
        let horizon_cap = match self.horizon_cap {
            HorizonSpec::Steps(n) => Some(n),
            HorizonSpec::Word(w) if w == "inf" => None,
            HorizonSpec::Word(w) => {
                return Err(MdpError::Format(format!("horizon_cap must be an integer or \"inf\", got {w:?}")))
            }
        };
        let mdp = FiniteMdp {
            num_states: nx,
            num_actions: nu,
            kernels,
            rewards: Matrix::from_row_slice(nx, nu, &self.rewards),
            gamma: self.gamma,
            terminal: self.terminal.into_iter().collect(),
            horizon_cap,
            initial: self.initial,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

/// A stationary randomized policy: one action pmf per state.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizedPolicy {
    probs: Matrix,
}

impl RandomizedPolicy {
    pub fn new(probs: Matrix) -> Result<Self> {
        for (x, row) in probs.row_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(MdpError::InvalidPolicy(format!("state {x} has invalid probabilities")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::InvalidPolicy(format!("state {x} pmf sums to {s}")));
            }
        }
        Ok(RandomizedPolicy { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        RandomizedPolicy {
            probs: Matrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// Mixes a deterministic policy with the uniform one:
    /// `(1-ε) δ_{φ(x)} + ε / |U|`.
    pub fn epsilon_soft(greedy: &[usize], num_actions: usize, epsilon: f64) -> Self {
        let mut probs = Matrix::from_element(greedy.len(), num_actions, epsilon / num_actions as f64);
        for (x, &u) in greedy.iter().enumerate() {
            probs[(x, u)] += 1.0 - epsilon;
        }
        RandomizedPolicy { probs }
    }

    pub fn prob(&self, x: usize, u: usize) -> f64 {
        self.probs[(x, u)]
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    fn check_shape(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.probs.nrows() != mdp.num_states() || self.probs.ncols() != mdp.num_actions() {
            return Err(MdpError::InvalidPolicy(format!(
                "policy is {}x{}, MDP has {} states and {} actions",
                self.probs.nrows(),
                self.probs.ncols(),
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        Ok(())
    }
}

/// Exploration policy driving the chain.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorPolicy {
    Randomized(RandomizedPolicy),
    /// Greedy with respect to the learner's current parameter with
    /// probability `1 - epsilon`, uniform otherwise.
    EpsilonGreedy { epsilon: f64 },
}

impl BehaviorPolicy {
    pub fn uniform(mdp: &FiniteMdp) -> Self {
        BehaviorPolicy::Randomized(RandomizedPolicy::uniform(mdp.num_states(), mdp.num_actions()))
    }

    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        match self {
            BehaviorPolicy::Randomized(p) => p.check_shape(mdp),
            BehaviorPolicy::EpsilonGreedy { epsilon } => {
                if (0.0..=1.0).contains(epsilon) {
                    Ok(())
                } else {
                    Err(MdpError::InvalidPolicy(format!("epsilon {epsilon} outside [0, 1]")))
                }
            }
        }
    }

    pub fn is_stationary(&self) -> bool {
        matches!(self, BehaviorPolicy::Randomized(_))
    }
}

/// One transition `Φ_{n+1} = (X_{n+1}, X_n, U_{n+1}, U_n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChainSample {
    pub x_next: usize,
    pub x: usize,
    pub u_next: usize,
    pub u: usize,
}

/// Inverse-CDF draw from a probability vector given `r ∈ [0, 1)`;
/// zero-weight entries are never selected.
pub fn sample_index(weights: impl Iterator<Item = f64>, r: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if r < acc {
            return i;
        }
    }
    last
}

/// Simulates the joint state-action chain under a behavior policy.
///
/// Deterministic given the seed. With a nonempty terminal set, or a finite
/// horizon cap, the chain restarts from the initial distribution after the
/// transition that enters `S` (or after `horizon_cap` transitions); the
/// sample recording that transition still carries the terminal `x_next`.
#[derive(Debug, Clone)]
pub struct ChainSimulator<'a> {
    mdp: &'a FiniteMdp,
    policy: &'a BehaviorPolicy,
    rng: ChaCha8Rng,
    initial: Vec<f64>,
    x: usize,
    u: usize,
    steps_in_episode: u64,
}

impl<'a> ChainSimulator<'a> {
    pub fn new(
        mdp: &'a FiniteMdp,
        policy: &'a BehaviorPolicy,
        rng: ChaCha8Rng,
        greedy: impl FnMut(usize) -> usize,
    ) -> Self {
        let mut sim = ChainSimulator {
            mdp,
            policy,
            rng,
            initial: mdp.initial_distribution(),
            x: 0,
            u: 0,
            steps_in_episode: 0,
        };
        sim.restart(greedy);
        sim
    }

    pub fn from_seed(mdp: &'a FiniteMdp, policy: &'a BehaviorPolicy, seed: u64) -> Self {
        Self::new(mdp, policy, ChaCha8Rng::seed_from_u64(seed), |_| 0)
    }

    fn choose_action(&mut self, x: usize, greedy: &mut impl FnMut(usize) -> usize) -> usize {
        let nu = self.mdp.num_actions();
        match self.policy {
            BehaviorPolicy::Randomized(p) => {
                let r: f64 = self.rng.random();
                sample_index((0..nu).map(|u| p.prob(x, u)), r)
            }
            BehaviorPolicy::EpsilonGreedy { epsilon } => {
                let r: f64 = self.rng.random();
                if r < *epsilon {
                    self.rng.random_range(0..nu)
                } else {
                    greedy(x)
                }
            }
        }
    }

    fn restart(&mut self, mut greedy: impl FnMut(usize) -> usize) {
        let r: f64 = self.rng.random();
        self.x = sample_index(self.initial.iter().copied(), r);
        self.u = self.choose_action(self.x, &mut greedy);
        self.steps_in_episode = 0;
    }

    /// Current `(X_n, U_n)`.
    pub fn current(&self) -> (usize, usize) {
        (self.x, self.u)
    }

    /// Advances one step; `greedy` supplies the current greedy action for
    /// epsilon-greedy exploration and is ignored for randomized policies.
    pub fn step_with(&mut self, mut greedy: impl FnMut(usize) -> usize) -> ChainSample {
        let (x, u) = (self.x, self.u);
        let r: f64 = self.rng.random();
        let x_next = sample_index(self.mdp.kernel(u).row(x).iter().copied(), r);
        let u_next = self.choose_action(x_next, &mut greedy);
        self.steps_in_episode += 1;
        let sample = ChainSample { x_next, x, u_next, u };
        let capped = self.mdp.horizon_cap().is_some_and(|cap| self.steps_in_episode >= cap);
        if self.mdp.is_terminal(x_next) || capped {
            self.restart(greedy);
        } else {
            self.x = x_next;
            self.u = u_next;
        }
        sample
    }

    pub fn step(&mut self) -> ChainSample {
        self.step_with(|_| 0)
    }

    /// Detaches the simulator from its borrows so it can be resumed later.
    pub fn into_state(self) -> ChainState {
        ChainState { rng: self.rng, x: self.x, u: self.u, steps_in_episode: self.steps_in_episode }
    }

    /// Continues a chain saved by [`ChainSimulator::into_state`].
    pub fn resume(mdp: &'a FiniteMdp, policy: &'a BehaviorPolicy, state: ChainState) -> Self {
        ChainSimulator {
            mdp,
            policy,
            rng: state.rng,
            initial: mdp.initial_distribution(),
            x: state.x,
            u: state.u,
            steps_in_episode: state.steps_in_episode,
        }
    }
}

/// Owned position and RNG of a [`ChainSimulator`].
#[derive(Debug, Clone)]
pub struct ChainState {
    rng: ChaCha8Rng,
    x: usize,
    u: usize,
    steps_in_episode: u64,
}

/// Result of [`simulate_chain`]: the samples plus any non-fatal warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub samples: Vec<ChainSample>,
    pub warnings: Vec<MdpError>,
}

/// Simulates `n` transitions. Epsilon-greedy policies require `greedy`.
pub fn simulate_chain(
    mdp: &FiniteMdp,
    policy: &BehaviorPolicy,
    seed: u64,
    n: usize,
    greedy: Option<&dyn Fn(usize) -> usize>,
) -> Result<ChainRun> {
    policy.validate(mdp)?;
    let mut warnings = Vec::new();
    match policy {
        BehaviorPolicy::Randomized(p) => {
            if let Err(e @ MdpError::NotIrreducible { .. }) = stationary_pmf(mdp, p) {
                warnings.push(e);
            }
        }
        BehaviorPolicy::EpsilonGreedy { .. } if greedy.is_none() => {
            return Err(MdpError::MissingGreedyCallback);
        }
        BehaviorPolicy::EpsilonGreedy { .. } => {}
    }
    let pick = |x: usize| greedy.map_or(0, |g| g(x));
    let mut sim = ChainSimulator::new(mdp, policy, ChaCha8Rng::seed_from_u64(seed), pick);
    let samples = (0..n).map(|_| sim.step_with(pick)).collect();
    Ok(ChainRun { samples, warnings })
}

/// Transition matrix of the joint `(x, u)` chain, including restarts from
/// the initial distribution after entering the terminal set.
pub fn joint_transition(mdp: &FiniteMdp, policy: &RandomizedPolicy) -> Result<Matrix> {
    policy.check_shape(mdp)?;
    let (nx, nu) = (mdp.num_states(), mdp.num_actions());
    let n = nx * nu;
    let restart = restart_pair_distribution(mdp, policy);
    let mut t = Matrix::zeros(n, n);
    for x in 0..nx {
        for u in 0..nu {
            let z = mdp.pair_index(x, u);
            for xn in 0..nx {
                let p = mdp.transition(x, u, xn);
                if p == 0.0 {
                    continue;
                }
                if mdp.is_terminal(xn) {
                    for (zn, w) in restart.iter().enumerate() {
                        t[(z, zn)] += p * w;
                    }
                } else {
                    for un in 0..nu {
                        t[(z, mdp.pair_index(xn, un))] += p * policy.prob(xn, un);
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Distribution of `(X_0, U_0)` at a restart.
pub fn restart_pair_distribution(mdp: &FiniteMdp, policy: &RandomizedPolicy) -> Vec<f64> {
    let init = mdp.initial_distribution();
    let nu = mdp.num_actions();
    let mut out = vec![0.0; mdp.num_pairs()];
    for (x, px) in init.iter().enumerate() {
        for u in 0..nu {
            out[x * nu + u] = px * policy.prob(x, u);
        }
    }
    out
}

/// Invariant pmf of a row-stochastic matrix, solving
/// `ϖ^T (I - T + 1 1^T) = 1^T`.
pub fn stationary_of(t: &Matrix) -> Result<Vector> {
    let n = t.nrows();
    let sv = linalg::singular_values(&(Matrix::identity(n, n) - t))
        .map_err(|_| MdpError::NotIrreducible { multiplicity: 0 })?;
    let scale = sv.max().max(1.0);
    let multiplicity = sv.iter().filter(|s| **s <= 1e-10 * scale).count();
    if multiplicity > 1 {
        return Err(MdpError::NotIrreducible { multiplicity });
    }
    let m = Matrix::identity(n, n) - t + Matrix::from_element(n, n, 1.0);
    let mut pi = linalg::solve(&m.transpose(), &Vector::from_element(n, 1.0))
        .map_err(|_| MdpError::NotIrreducible { multiplicity: 2 })?;
    for p in pi.iter_mut() {
        if *p < 0.0 {
            if *p < -1e-9 {
                return Err(MdpError::NotIrreducible { multiplicity: 2 });
            }
            *p = 0.0;
        }
    }
    let s = pi.sum();
    pi /= s;
    let resid = (t.transpose() * &pi - &pi).amax();
    if resid > STATIONARY_TOL {
        return Err(MdpError::NotIrreducible { multiplicity: 2 });
    }
    Ok(pi)
}

/// Stationary pmf of the joint `(x, u)` chain, indexed by pair.
pub fn stationary_pmf(mdp: &FiniteMdp, policy: &RandomizedPolicy) -> Result<Vector> {
    stationary_of(&joint_transition(mdp, policy)?)
}

/// Optimal Q-function by value iteration until `‖Q - 𝒯Q‖∞ ≤ tol`.
pub fn q_star(mdp: &FiniteMdp, tol: f64) -> Result<Matrix> {
    q_star_with_cap(mdp, tol, DEFAULT_VI_CAP)
}

pub fn q_star_with_cap(mdp: &FiniteMdp, tol: f64, max_iterations: usize) -> Result<Matrix> {
    let mut q = mdp.rewards().clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        let next = mdp.bellman(&q);
        residual = (&next - &q).amax();
        if !residual.is_finite() {
            break;
        }
        q = next;
        if residual <= tol {
            return Ok(q);
        }
    }
    Err(MdpError::Diverged { iterations: max_iterations, residual })
}

/// Greedy policy of a Q table with lowest-index tie breaking.
pub fn greedy_of_table(q: &Matrix) -> Vec<usize> {
    q.row_iter()
        .map(|row| {
            let mut best = 0;
            for u in 1..row.len() {
                if row[u] > row[best] {
                    best = u;
                }
            }
            best
        })
        .collect()
}

/// `Σ_Δ = Σ_k E[Δ_k Δ_0^T]` for `Δ_{n+1} = h(Φ_{n+1})` in steady state,
/// evaluated in closed form through the fundamental matrix
/// `Z = (I - T + 1 ϖ^T)^{-1}` of the joint chain.
///
/// With `h̄(z) = E[h(Φ) | (X_n,U_n) = z]`, the lag sum is
/// `Σ_{k≥1} C_k = E_ϖ[(R Z h̄)(X_{n+1},U_{n+1}) h(Φ)^T]` where `R` maps a
/// transition outcome to the next pair (restart law after terminal states),
/// and `Σ_Δ = C_0 + D + D^T`.
pub fn noise_covariance(
    mdp: &FiniteMdp,
    policy: &RandomizedPolicy,
    h: impl Fn(&ChainSample) -> Vector,
) -> Result<Matrix> {
    let t = joint_transition(mdp, policy)?;
    let pi = stationary_of(&t)?;
    let (nx, nu) = (mdp.num_states(), mdp.num_actions());
    let n = nx * nu;
    let restart = restart_pair_distribution(mdp, policy);

    // Enumerate transition outcomes with positive probability.
    struct Outcome {
        z: usize,
        weight: f64,
        sample: ChainSample,
        value: Vector,
    }
    let mut outcomes = Vec::new();
    for x in 0..nx {
        for u in 0..nu {
            for xn in 0..nx {
                let p = mdp.transition(x, u, xn);
                if p == 0.0 {
                    continue;
                }
                for un in 0..nu {
                    let w = p * policy.prob(xn, un);
                    if w == 0.0 {
                        continue;
                    }
                    let sample = ChainSample { x_next: xn, x, u_next: un, u };
                    let value = h(&sample);
                    outcomes.push(Outcome { z: x * nu + u, weight: w, sample, value });
                }
            }
        }
    }
    let Some(d) = outcomes.first().map(|o| o.value.len()) else {
        return Ok(Matrix::zeros(0, 0));
    };

    let mut hbar = Matrix::zeros(n, d);
    let mut c0 = Matrix::zeros(d, d);
    for o in &outcomes {
        for k in 0..d {
            hbar[(o.z, k)] += o.weight * o.value[k];
        }
        c0 += o.value.clone() * o.value.transpose() * (pi[o.z] * o.weight);
    }
    let mean = hbar.transpose() * &pi;
    if mean.norm() > CENTERING_TOL {
        return Err(MdpError::NotCentered { norm: mean.norm() });
    }

    let fundamental = Matrix::identity(n, n) - &t + Matrix::from_element(n, 1, 1.0) * pi.transpose();
    let zh = fundamental
        .lu()
        .solve(&hbar)
        .ok_or(MdpError::NotIrreducible { multiplicity: 2 })?;
    let restart_row = Vector::from_vec(restart).transpose() * &zh;

    let mut lag_sum = Matrix::zeros(d, d);
    for o in &outcomes {
        let next: Vector = if mdp.is_terminal(o.sample.x_next) {
            restart_row.transpose()
        } else {
            zh.row(mdp.pair_index(o.sample.x_next, o.sample.u_next)).transpose()
        };
        lag_sum += next * o.value.transpose() * (pi[o.z] * o.weight);
    }
    Ok(linalg::symmetrize(&(c0 + &lag_sum + lag_sum.transpose())))
}
