use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("cholesky factorization of {matrix} failed (max jitter {jitter:e})")]
    Cholesky { matrix: &'static str, jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("optimization failed at iteration {iteration}: {reason} (last objective {objective})")]
    Optimization {
        iteration: usize,
        objective: f64,
        reason: String,
    },

    #[error("{path}: row {row}, column {column}: {reason}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        reason: String,
    },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Cholesky { .. } | Error::NonFinite(_) | Error::Optimization { .. }
        )
    }
}
