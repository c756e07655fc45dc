use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmpfError {
    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("expression parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("malformed model at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("dataset error at row {row}: {message}")]
    Dataset { row: usize, message: String },

    #[error("degenerate truth: target values have zero variance")]
    DegenerateTruth,

    #[error("unknown target `{name}`; available: {available}")]
    UnknownTarget { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SmpfError> = std::result::Result<T, E>;
