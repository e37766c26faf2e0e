//! Error type shared by all modules.

use thiserror::Error;

/// Errors raised by the numeric stack and the training loop.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {op}: {details}")]
    DimensionMismatch { op: &'static str, details: String },

    /// Input lengths differ where equal lengths are required.
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    /// A matrix that must be symmetric is not.
    #[error("matrix is not symmetric at ({row},{col}): {left} vs {right}")]
    NotSymmetric {
        row: usize,
        col: usize,
        left: f64,
        right: f64,
    },

    /// Cholesky factorization failed for every jitter level tried.
    #[error("matrix not positive definite after {attempts} jitter attempts (size {size})")]
    NotPositiveDefinite { size: usize, attempts: usize },

    /// A gradient entry became NaN or infinite.
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    /// An invalid configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn dims(op: &'static str, details: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
