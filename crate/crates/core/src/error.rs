use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed model file: {0}")]
    ModelSyntax(String),

    #[error("layer {layer}: {message}")]
    DimensionMismatch { layer: usize, message: String },

    #[error("layer {layer}: non-finite parameter")]
    NonFinite { layer: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid pixel value {value} at index {index} (expected a finite value in [0,1])")]
    PixelRange { index: usize, value: f64 },

    #[error("IDX: {0}")]
    Idx(String),

    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("only {achievable} correctly classified images available, {requested} requested")]
    InsufficientSuite { requested: usize, achievable: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid trigger: {0}")]
    Trigger(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
