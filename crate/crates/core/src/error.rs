use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("operation requires a variational variant, got {0}")]
    NotVariational(String),

    #[error("input of spatial size {got:?} is smaller than the {need}^3 receptive field")]
    TooSmall { got: [usize; 3], need: usize },

    #[error("could only find {found} eligible patch centres, {requested} requested")]
    NotEnoughPatches { requested: usize, found: usize },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
