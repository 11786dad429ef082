use std::io;

use thiserror::Error;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("length mismatch in entry `{entry}`: expected {expected} bytes, found {actual}")]
    LengthMismatch { entry: String, expected: u64, actual: u64 },

    #[error("missing bundle entry `{0}`")]
    MissingEntry(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch in `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),

    #[error("need at least {need} frames, got {got}")]
    InsufficientFrames { need: usize, got: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("loss node must be scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::DegenerateRotation(_) | Error::Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn shape(node: &str, detail: impl Into<String>) -> Self {
        Error::Shape { node: node.to_string(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
