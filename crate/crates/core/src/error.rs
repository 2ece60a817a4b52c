//! Crate-wide error type and result alias.
//!
//! Errors carry a coarse [`ErrorCategory`] so callers (notably the CLI) can
//! map failures onto stable exit codes without matching on every variant.

use thiserror::Error;

/// Coarse classification of a failure, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Caller passed arguments or configuration that can never work.
    Usage,
    /// Input data (datasets, manifests, audio files) is malformed or missing.
    Data,
    /// A numeric computation failed (non-finite values, singular systems).
    Numeric,
    /// Filesystem or serialization trouble.
    Io,
}

/// Unified error type for the mage engine.
#[derive(Debug, Error)]
pub enum MageError {
    /// Invalid argument values: out-of-range sizes, inconsistent shapes
    /// requested by the caller, unsupported option combinations.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shape mismatch discovered while wiring a computation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numeric failure: non-finite intermediate, singular matrix, failed
    /// convergence of an iterative routine.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Invalid or inconsistent run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset or manifest problems: missing files, malformed records,
    /// constraint violations (e.g. too few classes to form mixtures).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization problems: bad magic, version mismatch,
    /// truncated tensor payloads.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MageError {
    /// The exit-code category for this error.
    pub fn category(&self) -> ErrorCategory {
        match self {
            MageError::InvalidArgument(_) | MageError::Config(_) => ErrorCategory::Usage,
            MageError::Data(_) => ErrorCategory::Data,
            MageError::Numeric(_) | MageError::Shape(_) => ErrorCategory::Numeric,
            MageError::Checkpoint(_)
            | MageError::Io(_)
            | MageError::Wav(_)
            | MageError::Json(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, MageError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_as_documented() {
        assert_eq!(
            MageError::InvalidArgument("x".into()).category(),
            ErrorCategory::Usage
        );
        assert_eq!(MageError::Data("x".into()).category(), ErrorCategory::Data);
        assert_eq!(
            MageError::Numeric("x".into()).category(),
            ErrorCategory::Numeric
        );
        assert_eq!(
            MageError::Checkpoint("x".into()).category(),
            ErrorCategory::Io
        );
    }
}
