//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Error`]. Variants are grouped by
//! failure class so callers (notably the CLI) can map them onto exit codes
//! without string matching.

use std::path::PathBuf;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An on-disk artifact is missing or does not parse as the documented
    /// layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// An episode or other structure fails its validity rules. `violations`
    /// holds one human-readable line per failed rule.
    #[error("validation failed: {}", violations.join("; "))]
    Validation { violations: Vec<String> },

    /// Not enough future odometry to place the requested geometry.
    #[error("insufficient future path: needed {needed_m} m, available {available_m} m")]
    InsufficientFuture { needed_m: f64, available_m: f64 },

    /// A goal too close to the origin to define a direction.
    #[error("degenerate goal: ({x}, {y}) is too close to the robot to aim at")]
    DegenerateGoal { x: f64, y: f64 },

    /// A loss or gradient stopped being finite during training.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Procedural generation could not satisfy its constraints.
    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub(crate) fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidInput(reason.into())
    }
}
