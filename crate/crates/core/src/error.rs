use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a precondition.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Breakdown of a numerical procedure (singular system, non-convergence, non-finite values).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The objective vanishes on every basis element, so every feasible
    /// perturbation is optimal.
    #[error("degenerate objective: all response coefficients vanish")]
    DegenerateObjective,

    #[error("kernel cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
