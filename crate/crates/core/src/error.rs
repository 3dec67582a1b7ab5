// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// Operand shapes do not conform for the named primitive.
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    /// A primitive produced or received a NaN or infinity.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A token id outside the model vocabulary.
    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: usize, vocab: usize },

    /// An edge name or id that the bound graph does not contain.
    #[error("unknown edge: {0}")]
    UnknownEdge(String),

    /// Malformed input file.
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Malformed circuit submission.
    #[error("circuit format: {0}")]
    CircuitFormat(String),

    /// Faithfulness denominator vanished.
    #[error("degenerate metric: {0}")]
    Degenerate(String),

    /// Loss became non-finite during optimization.
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    /// Training finished without reaching the requested accuracy.
    #[error("accuracy target {target:.3} not met (train {train:.3}, validation {validation:.3})")]
    TargetNotMet {
        target: f64,
        train: f64,
        validation: f64,
    },

    /// Exhaustive computation would exceed the configured budget.
    #[error("budget exceeded: {0}")]
    Budget(String),

    /// No connected circuit exists for the requested edge budget.
    #[error("infeasible selection: budget {budget} is below the minimal feasible budget {min_feasible}")]
    Infeasible { budget: usize, min_feasible: usize },

    /// A featurizer control task was fit too well.
    #[error("guardrail: {0}")]
    Guardrail(String),

    /// An artifact or checkpoint was written by an incompatible version or for another model.
    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
