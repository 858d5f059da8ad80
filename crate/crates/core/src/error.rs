use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("batchnorm `{0}`: uninitialized statistics (eval mode before any training batch)")]
    UninitializedStats(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("schema error in {path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at iteration {iter} (batch seed {batch_seed:#018x})")]
    NonFinite { iter: usize, batch_seed: u64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
