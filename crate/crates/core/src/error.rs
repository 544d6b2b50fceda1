use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss encountered: {0}")]
    NonFiniteLoss(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("context index is degenerate: {0}")]
    IndexDegenerate(String),

    #[error("retrieval underflow: requested {requested} {polarity} samples but only {available} available")]
    RetrievalUnderflow {
        polarity: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("sequence length {len} exceeds context window {window}")]
    Length { len: usize, window: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate idf: {0}")]
    DegenerateIdf(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
