//! Zap Q-learning and the tools to analyze it on finite MDPs.
//!
//! - [`linalg`]: dense kernels (eigenvalues, Lyapunov, SPD solves, Zap gain).
//! - [`mdp`]: finite MDPs, chain simulation, exact oracles.
//! - [`funcapprox`]: tabular, linear and neural Q-function families.
//! - [`algorithms`]: Watkins, GQ and Zap recursions with step-size schedules.
//! - [`analysis`]: exact mean fields, covariance reports, eigenvalue tests.
//! - [`odelab`]: integrators for the gradient and Newton-Raphson flows.
//! - [`expcli`]: experiment configuration, sweeps, evaluation and plots.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod linalg;
pub mod mdp;
pub mod funcapprox;
pub mod algorithms;
pub mod analysis;
pub mod odelab;
pub mod expcli;

pub use funcapprox::{QFamily, Theta};
pub use linalg::{Matrix, Vector};
pub use mdp::{BehaviorPolicy, ChainSample, FiniteMdp, RandomizedPolicy};
