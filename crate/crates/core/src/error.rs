use thiserror::Error;

/// Errors raised by estimation, inference and simulation routines.
#[derive(Debug, Error)]
pub enum CocregError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data for {what}: {got} rows, need at least {need}")]
    InsufficientData {
        what: String,
        got: usize,
        need: usize,
    },

    #[error("{which} covariance of subject `{subject}` is not strictly positive definite")]
    NotPositiveDefinite { subject: String, which: &'static str },

    #[error("non-positive quadratic form ({which}) for subject index {subject}")]
    NonPositiveForm { subject: usize, which: &'static str },

    #[error("degenerate predictor: all log predictor forms vanish")]
    DegeneratePredictor,

    #[error("collinear design: Gram matrix condition number {condition:e} exceeds limit")]
    Collinear { condition: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("all {} restarts failed: {}", diagnostics.len(), diagnostics.join("; "))]
    FitFailure { diagnostics: Vec<String> },

    #[error("{failed} of {total} {what} failed, above the {limit_pct}% limit")]
    TooManyFailures {
        what: &'static str,
        failed: usize,
        total: usize,
        limit_pct: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CocregError {
    /// Whether the error stems from malformed input rather than a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            CocregError::Validation(_)
                | CocregError::InsufficientData { .. }
                | CocregError::NotPositiveDefinite { .. }
                | CocregError::Precondition(_)
                | CocregError::Io(_)
                | CocregError::Json(_)
                | CocregError::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CocregError>;
