use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite gradient at parameter {index}; step rejected")]
    NonFiniteGradient { index: usize },

    #[error("non-finite field output at tau={tau} (step {step})")]
    NonFiniteField { tau: f64, step: usize },

    #[error("non-finite loss at layer {layer} over a batch of {batch} samples")]
    NonFiniteLoss { layer: usize, batch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer} is out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("layer {0} is not an eligible tap")]
    IneligibleLayer(usize),

    #[error("cursor is at layer {current}, cannot move back to layer {requested}")]
    CursorRewind { current: usize, requested: usize },

    #[error("{0} head is not available on this policy")]
    UnsupportedHead(&'static str),

    #[error("forward cache does not match the network")]
    CacheMismatch,

    #[error("prediction failed for sample {sample} at tap {tap}: {source}")]
    TapFailure {
        sample: usize,
        tap: usize,
        source: Box<Error>,
    },

    #[error("i/o error at {path}: {message}", path = path.display())]
    Io { path: PathBuf, message: String },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
