// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::process::ExitCode;

use mib_core::Error;

/// Failure classes, each with its own process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    /// Bad configuration, inputs or files.
    Validation,
    /// Non-finite values, divergence, degenerate metrics.
    Numeric,
    /// A featurizer fit its control task.
    Guardrail,
}

impl Failure {
    pub fn code(self) -> u8 {
        match self {
            Failure::Validation => 2,
            Failure::Numeric => 3,
            Failure::Guardrail => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub failure: Failure,
    pub message: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self {
            failure: Failure::Validation,
            message: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            failure: Failure::Numeric,
            message: msg.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.failure.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let failure = match &e {
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::Degenerate(_) | Error::TargetNotMet { .. } => {
                Failure::Numeric
            }
            Error::Guardrail(_) => Failure::Guardrail,
            _ => Failure::Validation,
        };
        Self {
            failure,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::validation(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
