use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::algorithms::{Algorithm, StepSchedule, TrainOptions};
use crate::funcapprox::{InputEncoding, LinearBasis, Mlp, QFamily, DEFAULT_LEAKY_SLOPE};
use crate::mdp::{BehaviorPolicy, FiniteMdp, RandomizedPolicy};

/// Q-function family as written in a config; state and action counts come
/// from the MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    #[default]
    Tabular,
    Linear {
        dim: usize,
        /// Row-major `(ℓx·ℓu) × dim` feature matrix.
        features: Vec<f64>,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_slope")]
        slope: f64,
        #[serde(default)]
        encoding: InputEncoding,
    },
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl FamilySpec {
    pub fn build(&self, mdp: &FiniteMdp) -> Result<QFamily, CliError> {
        let (nx, nu) = (mdp.num_states(), mdp.num_actions());
        let fam = match self {
            FamilySpec::Tabular => QFamily::tabular(nx, nu),
            FamilySpec::Linear { dim, features } => {
                QFamily::Linear(LinearBasis::new(nx, nu, *dim, features.clone()).map_err(CliError::config)?)
            }
            FamilySpec::Mlp { hidden, slope, encoding } => QFamily::Mlp(Mlp {
                num_states: nx,
                num_actions: nu,
                hidden: hidden.clone(),
                slope: *slope,
                encoding: *encoding,
            }),
        };
        fam.validate().map_err(CliError::config)?;
        Ok(fam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Diminishing,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_rollouts")]
    pub num_rollouts: usize,
    /// Rollout horizon `τ̄`.
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rollouts() -> usize {
    100
}

fn default_horizon() -> u64 {
    200
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { num_rollouts: default_rollouts(), horizon: default_horizon(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Gradient,
    Nr,
    #[default]
    Regularized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSettings {
    #[serde(default)]
    pub kind: FlowKind,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Regularization of the regularized flow.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Initial state; zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<Vec<f64>>,
}

fn default_t_final() -> f64 {
    10.0
}

fn default_dt() -> f64 {
    1e-3
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings { kind: FlowKind::default(), t_final: default_t_final(), dt: default_dt(), eps: default_eps(), w0: None }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// MDP file, relative to the config file's directory.
    pub mdp: PathBuf,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default = "default_n0")]
    pub n0: u64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Numerator of `α_n = gain/(n + n0)`.
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_k_ratio")]
    pub k_ratio: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_gain_period")]
    pub gain_period: u64,
    #[serde(default = "default_eligibility_period")]
    pub eligibility_period: u64,
    #[serde(default = "default_projection_radius")]
    pub projection_radius: f64,
    /// Epsilon-greedy exploration rate; uniform randomized behavior when
    /// omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodic: Option<bool>,
    pub n_steps: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_num_runs")]
    pub num_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Sweep worker threads; all cores when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub family: FamilySpec,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub flow: FlowSettings,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Zapq
}
fn default_n0() -> u64 {
    100
}
fn default_rho() -> f64 {
    0.85
}
fn default_gain() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.005
}
fn default_k_ratio() -> f64 {
    100.0
}
fn default_eps() -> f64 {
    1e-6
}
fn default_gain_period() -> u64 {
    50
}
fn default_eligibility_period() -> u64 {
    2000
}
fn default_projection_radius() -> f64 {
    1e6
}
fn default_checkpoint_every() -> u64 {
    1000
}
fn default_num_runs() -> usize {
    50
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Config with every optional key at its default.
    pub fn new(mdp: impl Into<PathBuf>, n_steps: u64) -> Self {
        let text = format!("mdp = {:?}\nn_steps = {n_steps}\n", mdp.into().to_string_lossy());
        Self::from_toml_str(&text).expect("minimal config parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(CliError::config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config and resolves the MDP and output paths against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.mdp.is_relative() {
            cfg.mdp = base.join(&cfg.mdp);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::config(m));
        self.schedule().map_err(CliError::config)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps = {} must be positive", self.eps));
        }
        if self.gain_period == 0 || self.eligibility_period == 0 {
            return fail("gain_period and eligibility_period must be at least 1".into());
        }
        if !(self.projection_radius > 0.0) {
            return fail("projection_radius must be positive".into());
        }
        if let Some(e) = self.exploration {
            if !(0.0..=1.0).contains(&e) {
                return fail(format!("exploration = {e} outside [0, 1]"));
            }
        }
        if self.num_runs == 0 {
            return fail("num_runs must be at least 1".into());
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1".into());
        }
        if self.eval.num_rollouts == 0 || self.eval.horizon == 0 {
            return fail("eval.num_rollouts and eval.horizon must be at least 1".into());
        }
        if !(self.flow.dt > 0.0 && self.flow.t_final >= 0.0 && self.flow.eps > 0.0) {
            return fail("flow needs dt > 0, t_final >= 0 and eps > 0".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<StepSchedule, crate::algorithms::AlgoError> {
        match self.schedule {
            ScheduleKind::Diminishing => StepSchedule::scaled(self.gain, self.n0, self.rho),
            ScheduleKind::Constant => StepSchedule::constant(self.alpha, self.k_ratio),
        }
    }

    pub fn behavior(&self, mdp: &FiniteMdp) -> BehaviorPolicy {
        match self.exploration {
            Some(epsilon) => BehaviorPolicy::EpsilonGreedy { epsilon },
            None => BehaviorPolicy::Randomized(RandomizedPolicy::uniform(mdp.num_states(), mdp.num_actions())),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            eps: self.eps,
            gain_period: self.gain_period,
            eligibility_period: self.eligibility_period,
            projection_radius: Some(self.projection_radius),
            theta0: None,
            warmup: None,
            episodic: self.episodic,
            track_fbar: true,
        }
    }

    pub fn load_mdp(&self) -> Result<FiniteMdp, CliError> {
        FiniteMdp::load(&self.mdp).map_err(|e| CliError::config(format!("{}: {e}", self.mdp.display())))
    }
}
