use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGrad { param: String },

    #[error("{0}: forward cache missing or already consumed")]
    CacheConsumed(&'static str),

    #[error("architecture parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("checkpoint entry `{name}` does not match the network: {msg}")]
    CheckpointMismatch { name: String, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            got,
        }
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }
}
