//! Parameterized Q-function families `Q^θ(x, u)`.
//!
//! Three kinds are supported: tabular (indicator basis), linear in a fixed
//! basis `ψ(x, u)`, and a fully connected leaky-ReLU perceptron. Every kind
//! provides values, exact parameter gradients and the greedy policy with
//! lowest-index tie breaking.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vector;

pub type Theta = Vector;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FamilyError {
    #[error("invalid family: {0}")]
    Invalid(String),
    #[error("parameter has dimension {got}, family expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// How `(x, u)` is fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// One-hot state followed by `u / (|U| - 1)` (0 when `|U| = 1`).
    #[default]
    OneHotStateScalarAction,
    /// One-hot state followed by one-hot action.
    OneHotStateOneHotAction,
}

/// Fully connected network with leaky-ReLU hidden layers and a scalar
/// linear output. Parameters are laid out layer by layer, each layer as its
/// weight matrix (row-major, `out × in`) followed by its bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub num_states: usize,
    pub num_actions: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default)]
    pub encoding: InputEncoding,
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        match self.encoding {
            InputEncoding::OneHotStateScalarAction => self.num_states + 1,
            InputEncoding::OneHotStateOneHotAction => self.num_states + self.num_actions,
        }
    }

    /// Layer widths from input to the scalar output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim());
        w.extend(&self.hidden);
        w.push(1);
        w
    }

    /// Number of parameters; each layer contributes `(in + 1) · out`.
    pub fn dim(&self) -> usize {
        self.widths().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn encode(&self, x: usize, u: usize) -> Vec<f64> {
        let mut input = vec![0.0; self.input_dim()];
        input[x] = 1.0;
        match self.encoding {
            InputEncoding::OneHotStateScalarAction => {
                if self.num_actions > 1 {
                    input[self.num_states] = u as f64 / (self.num_actions - 1) as f64;
                }
            }
            InputEncoding::OneHotStateOneHotAction => input[self.num_states + u] = 1.0,
        }
        input
    }

    fn activate(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.slope * z
        }
    }

    fn activate_deriv(&self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.slope
        }
    }

    /// Forward pass keeping every layer's pre-activations and activations.
    fn forward(&self, theta: &[f64], x: usize, u: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let widths = self.widths();
        let layers = widths.len() - 1;
        let mut acts = vec![self.encode(x, u)];
        let mut pre = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &theta[offset..offset + n_in * n_out];
            let b = &theta[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let a = &acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>())
                .collect();
            let next = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.activate(v)).collect()
            };
            pre.push(z);
            acts.push(next);
        }
        (pre, acts)
    }

    pub fn value(&self, theta: &[f64], x: usize, u: usize) -> f64 {
        let (_, acts) = self.forward(theta, x, u);
        acts.last().unwrap()[0]
    }

    /// Value and gradient by backpropagation. The leaky-ReLU derivative at
    /// zero is taken as the slope.
    pub fn value_and_gradient(&self, theta: &[f64], x: usize, u: usize) -> (f64, Vec<f64>) {
        let widths = self.widths();
        let layers = widths.len() - 1;
        let (pre, acts) = self.forward(theta, x, u);
        let mut grad = vec![0.0; theta.len()];
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += (widths[l] + 1) * widths[l + 1];
        }
        let mut delta = vec![1.0];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let off = offsets[l];
            let a = &acts[l];
            for o in 0..n_out {
                let row = off + o * n_in;
                for i in 0..n_in {
                    grad[row + i] = delta[o] * a[i];
                }
                grad[off + n_in * n_out + o] = delta[o];
            }
            if l > 0 {
                let w = &theta[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                        back * self.activate_deriv(pre[l - 1][i])
                    })
                    .collect();
            }
        }
        (acts.last().unwrap()[0], grad)
    }

    /// Kaiming-uniform weights for the leaky-ReLU gain, zero biases.
    pub fn kaiming_uniform(&self, rng: &mut impl Rng) -> Vec<f64> {
        let widths = self.widths();
        let mut theta = Vec::with_capacity(self.dim());
        for w in widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / ((1.0 + self.slope * self.slope) * n_in as f64)).sqrt();
            theta.extend((0..n_in * n_out).map(|_| rng.random_range(-bound..bound)));
            theta.extend(std::iter::repeat_n(0.0, n_out));
        }
        theta
    }
}

/// Linear architecture `Q^θ(x, u) = ψ(x, u)^T θ`. `features` stores one row
/// of length `dim` per state-action pair, pairs ordered `x * |U| + u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBasis {
    pub num_states: usize,
    pub num_actions: usize,
    pub dim: usize,
    pub features: Vec<f64>,
}

impl LinearBasis {
    pub fn new(num_states: usize, num_actions: usize, dim: usize, features: Vec<f64>) -> Result<Self, FamilyError> {
        if features.len() != num_states * num_actions * dim {
            return Err(FamilyError::Invalid(format!(
                "basis has {} entries, expected {}",
                features.len(),
                num_states * num_actions * dim
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FamilyError::Invalid("basis entries must be finite".into()));
        }
        Ok(LinearBasis { num_states, num_actions, dim, features })
    }

    /// The indicator basis, equivalent to the tabular family.
    pub fn indicator(num_states: usize, num_actions: usize) -> Self {
        let n = num_states * num_actions;
        let mut features = vec![0.0; n * n];
        for k in 0..n {
            features[k * n + k] = 1.0;
        }
        LinearBasis { num_states, num_actions, dim: n, features }
    }

    pub fn psi(&self, x: usize, u: usize) -> &[f64] {
        let k = x * self.num_actions + u;
        &self.features[k * self.dim..(k + 1) * self.dim]
    }
}

/// A parameterized family of Q-function approximations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QFamily {
    Tabular { num_states: usize, num_actions: usize },
    Linear(LinearBasis),
    Mlp(Mlp),
}

impl QFamily {
    pub fn tabular(num_states: usize, num_actions: usize) -> Self {
        QFamily::Tabular { num_states, num_actions }
    }

    pub fn mlp(num_states: usize, num_actions: usize, hidden: Vec<usize>) -> Self {
        QFamily::Mlp(Mlp {
            num_states,
            num_actions,
            hidden,
            slope: DEFAULT_LEAKY_SLOPE,
            encoding: InputEncoding::default(),
        })
    }

    pub fn validate(&self) -> Result<(), FamilyError> {
        match self {
            QFamily::Tabular { num_states, num_actions } => {
                if *num_states == 0 || *num_actions == 0 {
                    return Err(FamilyError::Invalid("empty tabular family".into()));
                }
            }
            QFamily::Linear(b) => {
                LinearBasis::new(b.num_states, b.num_actions, b.dim, b.features.clone())?;
            }
            QFamily::Mlp(m) => {
                if !(m.slope > 0.0 && m.slope < 1.0) {
                    return Err(FamilyError::Invalid(format!("leaky slope {} outside (0, 1)", m.slope)));
                }
                if m.hidden.contains(&0) {
                    return Err(FamilyError::Invalid("hidden layer widths must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        match self {
            QFamily::Tabular { num_states, .. } => *num_states,
            QFamily::Linear(b) => b.num_states,
            QFamily::Mlp(m) => m.num_states,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            QFamily::Tabular { num_actions, .. } => *num_actions,
            QFamily::Linear(b) => b.num_actions,
            QFamily::Mlp(m) => m.num_actions,
        }
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        match self {
            QFamily::Tabular { num_states, num_actions } => num_states * num_actions,
            QFamily::Linear(b) => b.dim,
            QFamily::Mlp(m) => m.dim(),
        }
    }

    /// True for tabular and linear families, whose gradient does not depend
    /// on `θ`.
    pub fn is_linear(&self) -> bool {
        !matches!(self, QFamily::Mlp(_))
    }

    pub fn check_theta(&self, theta: &Theta) -> Result<(), FamilyError> {
        if theta.len() != self.dim() {
            return Err(FamilyError::DimensionMismatch { expected: self.dim(), got: theta.len() });
        }
        Ok(())
    }

    /// Basis vector `ψ(x, u)` for tabular and linear families.
    pub fn features(&self, x: usize, u: usize) -> Option<Vector> {
        match self {
            QFamily::Tabular { num_actions, .. } => {
                let mut e = Vector::zeros(self.dim());
                e[x * num_actions + u] = 1.0;
                Some(e)
            }
            QFamily::Linear(b) => Some(Vector::from_column_slice(b.psi(x, u))),
            QFamily::Mlp(_) => None,
        }
    }

    pub fn q_value(&self, theta: &Theta, x: usize, u: usize) -> f64 {
        match self {
            QFamily::Tabular { num_actions, .. } => theta[x * num_actions + u],
            QFamily::Linear(b) => b.psi(x, u).iter().zip(theta.iter()).map(|(p, t)| p * t).sum(),
            QFamily::Mlp(m) => m.value(theta.as_slice(), x, u),
        }
    }

    pub fn q_gradient(&self, theta: &Theta, x: usize, u: usize) -> Vector {
        match self {
            QFamily::Mlp(m) => Vector::from_vec(m.value_and_gradient(theta.as_slice(), x, u).1),
            _ => self.features(x, u).expect("linear family has features"),
        }
    }

    pub fn q_value_and_gradient(&self, theta: &Theta, x: usize, u: usize) -> (f64, Vector) {
        match self {
            QFamily::Mlp(m) => {
                let (v, g) = m.value_and_gradient(theta.as_slice(), x, u);
                (v, Vector::from_vec(g))
            }
            _ => (self.q_value(theta, x, u), self.features(x, u).expect("linear family has features")),
        }
    }

    /// `(argmax_u Q^θ(x, u), max_u Q^θ(x, u))`, lowest index on ties.
    pub fn greedy_action_value(&self, theta: &Theta, x: usize) -> (usize, f64) {
        let mut best = (0, self.q_value(theta, x, 0));
        for u in 1..self.num_actions() {
            let q = self.q_value(theta, x, u);
            if q > best.1 {
                best = (u, q);
            }
        }
        best
    }

    pub fn greedy_action(&self, theta: &Theta, x: usize) -> usize {
        self.greedy_action_value(theta, x).0
    }

    /// Greedy policy `φ^θ`. Choosing the lowest maximizing action in every
    /// state selects the first policy, in lexicographic order, that is greedy
    /// everywhere.
    pub fn greedy_policy(&self, theta: &Theta) -> Vec<usize> {
        (0..self.num_states()).map(|x| self.greedy_action(theta, x)).collect()
    }

    /// Eligibility vector `ζ = ∇_θ Q^{anchor}(x, u)`.
    pub fn eligibility(&self, anchor: &Theta, x: usize, u: usize) -> Vector {
        self.q_gradient(anchor, x, u)
    }

    /// Initial parameter: zero for tabular and linear, Kaiming-uniform for
    /// networks.
    pub fn initial_theta(&self, rng: &mut impl Rng) -> Theta {
        match self {
            QFamily::Mlp(m) => Vector::from_vec(m.kaiming_uniform(rng)),
            _ => Vector::zeros(self.dim()),
        }
    }

    /// Q-table `ℓx × ℓu` of `Q^θ`.
    pub fn q_table(&self, theta: &Theta) -> crate::linalg::Matrix {
        crate::linalg::Matrix::from_fn(self.num_states(), self.num_actions(), |x, u| self.q_value(theta, x, u))
    }
}

/// Parameter checkpoint: family descriptor plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub family: QFamily,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn new(family: QFamily, theta: &Theta) -> Self {
        Checkpoint { family, theta: theta.as_slice().to_vec() }
    }

    pub fn theta(&self) -> Theta {
        Vector::from_column_slice(&self.theta)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, FamilyError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| FamilyError::Checkpoint(e.to_string()))?;
        ck.family.validate()?;
        if ck.theta.len() != ck.family.dim() {
            return Err(FamilyError::DimensionMismatch { expected: ck.family.dim(), got: ck.theta.len() });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FamilyError> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| FamilyError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FamilyError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| FamilyError::Checkpoint(e.to_string()))?;
        Self::from_json(&text)
    }
}
