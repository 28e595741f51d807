use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HlfdError>;

#[derive(Debug, Error)]
pub enum HlfdError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload at sample {index}")]
    Truncated { index: usize },

    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),

    #[error("invalid label {label} in sample {index}")]
    InvalidLabel { index: usize, label: u8 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("ground-truth mask is empty; relative volume difference is undefined")]
    EmptyGroundTruth,

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HlfdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HlfdError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        HlfdError::InvalidArgument(detail.into())
    }
}
