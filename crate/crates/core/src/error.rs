use std::io;

use thiserror::Error;

use crate::network::M2fcn;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("malformed PGM header: {0}")]
    PgmHeader(String),

    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    PgmTruncated { expected: usize, found: usize },

    #[error("unsupported PGM depth (maxval {0})")]
    PgmDepth(u32),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        /// Parameters with the lowest training loss seen before the failure.
        best: Box<M2fcn>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
