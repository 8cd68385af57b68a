use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("operation {0} has no derivative on this path")]
    UnsupportedOp(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("problem too large: {0}")]
    Scale(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("no perturbation in the neighborhood preserves the predicted class")]
    EmptyNeighborhood,

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}
