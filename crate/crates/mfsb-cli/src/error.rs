use std::fmt;

use thiserror::Error;

/// Standing assumptions a scenario is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    /// W symmetric with bounded Hessian.
    H1,
    /// Endpoints with finite second moment and entropy, negligible boundary mass.
    H2,
    /// W κ-convex with κ > 0.
    H3,
    /// Endpoints share their mean.
    H4,
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("hypothesis {which} violated: {reason}")]
    HypothesisViolation { which: Hypothesis, reason: String },
    #[error("flow file format version {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("flow file checksum mismatch")]
    ChecksumMismatch,
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("failed checks: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),
    #[error(transparent)]
    Model(#[from] mfsb::Error),
}

impl CliError {
    /// 0 success, 1 check failure, 2 validation error, 3 solver non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::NoConvergence(_) | CliError::Model(mfsb::Error::NoConvergence { .. }) => 3,
            _ => 2,
        }
    }

    pub(crate) fn h(which: Hypothesis, reason: impl Into<String>) -> Self {
        CliError::HypothesisViolation { which, reason: reason.into() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
