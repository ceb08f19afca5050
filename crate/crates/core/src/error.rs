use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Bad command-line input, such as an unknown override key.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("autodiff error: {0}")]
    Tape(String),

    #[error("weight file error: {0}")]
    Format(String),

    #[error("rejected sample: {0}")]
    Sample(String),

    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial loss {initial} for {window} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
