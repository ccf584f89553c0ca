use std::io;

use thiserror::Error;

use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    Size(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DType { expected: DType, found: DType },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Graph construction failed at a specific layer.
    #[error("layer `{layer}`: {reason}")]
    Build { layer: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt entry `{entry}`: {reason}")]
    Corrupt { entry: String, reason: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn build(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Build {
            layer: layer.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 for anything file related, 3 for
    /// shape and configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) | Error::Version { .. } | Error::Corrupt { .. } => 2,
            _ => 3,
        }
    }
}
