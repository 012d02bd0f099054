use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum CinaError {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dataset `{id}` is degenerate: {reason}")]
    DegenerateDataset { id: String, reason: String },

    #[error("empty collection")]
    EmptyCollection,

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error(
        "kernel overflow: scaled key dot product {value:.3} exceeds {limit}; standardize the keys"
    )]
    KernelOverflow { value: f64, limit: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("empty {0} group")]
    EmptyGroup(&'static str),

    #[error("treatment column {column} has an empty {group} group")]
    EmptyTreatmentColumn { column: usize, group: &'static str },

    #[error("scm generation failed: {0}")]
    Generation(String),

    #[error("cyclic graph")]
    CyclicGraph,

    #[error("dataset `{0}` has no ground-truth ATE")]
    MissingTruth(String),

    #[error("no validation datasets with ground-truth ATE")]
    NoValidationTruth,

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("no ITE estimate: all {0} neighbors were skipped")]
    NoIteEstimate(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CinaError>;
