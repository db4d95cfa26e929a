use std::io;

use thiserror::Error;

/// Errors raised while parsing MNIST-style IDX files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside [0, 10)")]
    LabelOutOfRange { index: usize, label: u8 },
}

/// Errors raised by the binary containers ("ADNN" checkpoints and "ADNC" models).
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unexpected end of data")]
    UnexpectedEof,
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("weight {value} at flat index {index} of layer {layer} is not a quantization level")]
    Unquantized { layer: usize, index: usize, value: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at ADMM iteration {iteration}: loss is {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("constraint infeasible: {0}")]
    Infeasible(String),
    #[error("no break-even point on this platform: speedup never reaches 1.0")]
    NoBreakEven,
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
