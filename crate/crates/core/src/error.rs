use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum SflError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch at layer {layer} ({kind}): expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: String,
        actual: String,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("split position V{position} exceeds the model's {available} split-eligible layers")]
    InvalidSplit { position: usize, available: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SflError>;

impl SflError {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        SflError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
