use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine, models, data harness and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{stage} reduces spatial size below 1 at input size {input}")]
    StageTooSmall { stage: String, input: usize },

    #[error("subnet {index} (scale {size}) cannot reach the common feature shape: {reason}")]
    ScaleAdaptation {
        index: usize,
        size: usize,
        reason: String,
    },

    #[error("unknown layer tap `{0}`")]
    UnknownTap(String),

    #[error("bad magic number {found:#010x} in {what} (expected {expected:#010x})")]
    BadMagic {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("truncated payload in {0}")]
    Truncated(String),

    #[error("record count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
