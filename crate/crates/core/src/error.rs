use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated {0}")]
    Truncated(String),
    #[error("unsupported color space tag C{0}")]
    UnsupportedColorSpace(String),
    #[error("maxval ≠ 255 (found {0})")]
    UnsupportedMaxval(usize),
    #[error("payload size mismatch: {0}")]
    PayloadSize(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("ΔQP value {0} out of range [-10, 10]")]
    DqpOutOfRange(i32),
    #[error("zero-dimension input")]
    ZeroDimension,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("no sign change of the rate residual over [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },
    #[error("missing required tensor: {0}")]
    MissingTensor(String),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("encoder template is missing placeholder {0}")]
    MissingPlaceholder(&'static str),
    #[error("encoder exited with {status}: {stderr}")]
    EncoderFailed { status: String, stderr: String },
    #[error("encoder produced no output at {0}")]
    MissingOutput(String),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, Error>;
