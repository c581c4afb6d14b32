//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapaError {
    /// Physically invalid input (user on the aperture, zero-norm channel, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed arguments (zero grid counts, empty method list, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Non-finite value produced during numerical evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Shape or dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// All-zero beam where a power normalization was requested.
    #[error("degenerate beam: {0}")]
    DegenerateBeam(String),

    /// Factorization or solve failed.
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// A required file (checkpoint, dataset, config) is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for CapaError {
    fn from(e: serde_json::Error) -> Self {
        CapaError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CapaError>;
