//! Experiment harness: configuration, seeded runs and sweeps, policy
//! evaluation, percentile aggregation, plots and the `zapq` command line.

pub mod aggregate;
pub mod cli;
pub mod commands;
pub mod config;
pub mod eval;
pub mod plot;

use std::fmt::Display;

use serde_json::json;

pub use aggregate::{AggregateResult, Metric, RunRow};
pub use config::{ExperimentConfig, FamilySpec};
pub use eval::{evaluate_policy, EvalResult};
pub use plot::{emit_plot, EmptyInput, PlotInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, unreadable or invalid configuration (exit code 1).
    Config,
    /// Failure while running a valid experiment (exit code 2).
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Config, message: e.to_string() }
    }

    pub fn runtime(e: impl Display) -> Self {
        CliError { kind: ErrorKind::Runtime, message: e.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Runtime => 2,
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Config => "config",
            ErrorKind::Runtime => "runtime",
        };
        json!({ "error": kind, "exit_code": self.exit_code(), "message": self.message }).to_string()
    }
}
