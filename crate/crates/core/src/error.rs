use thiserror::Error;

/// Errors raised by the model, its linear algebra and its data layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("matrix of size {size} is not positive definite even with jitter {max_jitter:e}")]
    Indefinite { size: usize, max_jitter: f64 },

    #[error("kernel family {family} has no closed-form expectation; use the Monte-Carlo path")]
    UnsupportedFamily { family: String },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("unknown replica tag {tag} (model has {replicas} replicas)")]
    ReplicaTag { tag: usize, replicas: usize },

    #[error("non-finite value in {span}")]
    NonFinite { span: String },

    #[error("problem too large for the dense reference path: {what}")]
    SizeGuard { what: String },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.into(),
        reason: reason.into(),
    }
}

pub(crate) fn mismatch(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
