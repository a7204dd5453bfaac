//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no points")]
    NoPoints,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time {0} outside [0,1]")]
    TimeOutOfRange(f64),
    #[error("position component {0} overflows 16-bit float range")]
    Fp16Overflow(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("unknown scene name: {0}")]
    UnknownScene(String),
    #[error("unknown attribute type: {0}")]
    UnknownAttribute(String),
    #[error("chunk index {0} out of range (have {1})")]
    ChunkOutOfRange(usize, usize),
    #[error("malformed cdf: {0}")]
    MalformedCdf(String),
    #[error("bitstream format error: {0}")]
    Format(String),
    #[error("non-finite loss part `{part}` at iteration {iteration}")]
    NonFiniteLoss { part: String, iteration: usize },
    #[error("training diverged at iteration {0}")]
    Diverged(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
