use thiserror::Error;

/// Errors produced by the contour QA toolkit.
#[derive(Debug, Error)]
pub enum QaError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema mismatch: expected `{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("solver did not converge after {iterations} iterations (max KKT violation {violation:e})")]
    NonConvergence { iterations: usize, violation: f64 },

    #[error("perturbation failed: {0}")]
    Generation(String),
}

impl QaError {
    /// Whether the error belongs to the IO/format family (CLI exit code 2)
    /// rather than validation (exit code 1).
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            QaError::Io(_)
                | QaError::MalformedHeader(_)
                | QaError::PayloadLength { .. }
                | QaError::UnsupportedDtype(_)
                | QaError::Format(_)
        )
    }
}

impl From<csv::Error> for QaError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => QaError::Io(io),
            other => QaError::Format(format!("{other:?}")),
        }
    }
}

impl From<serde_json::Error> for QaError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            QaError::Io(e.into())
        } else {
            QaError::Format(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, QaError>;
