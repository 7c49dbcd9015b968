use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("variable {column} has zero or non-positive variance")]
    DegenerateVariable { column: usize },

    #[error("subset has zero variance in column {column}")]
    DegenerateSubset { column: usize },

    #[error("ill-conditioned trace estimate: tr(R^2) - p^2/m = {value} (m too small relative to p)")]
    IllConditioned { value: f64 },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid process parameters: {0}")]
    InvalidParameters(String),

    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is singular")]
    Singular,

    #[error("robust estimation failed: {0}")]
    EstimationFailure(String),

    #[error("too many failed replications: {failed} of {total}")]
    SkipRateExceeded { failed: usize, total: usize },

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
