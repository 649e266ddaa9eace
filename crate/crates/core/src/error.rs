use std::path::PathBuf;

/// Errors raised by the analysis core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("missing required field `{field}`{}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    MissingField { field: &'static str, line: Option<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("item bank: {0}")]
    ItemBank(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("embedding provider failed: {0}")]
    Provider(String),

    #[error("embedding cache missing {} key(s): {}", .0.len(), .0.join(", "))]
    CacheMiss(Vec<String>),

    #[error("matrix is singular or not positive definite")]
    Singular,

    #[error("zero variance in column `{0}`")]
    ZeroVariance(String),

    #[error("no common variance: all off-diagonal correlations are zero")]
    NoCommonVariance,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("both classes must be present")]
    SingleClass,

    #[error("fingerprint mismatch for {what}: expected {expected}, found {found}")]
    FingerprintMismatch { what: String, expected: String, found: String },

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
