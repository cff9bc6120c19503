use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward called without saved forward state for {0}")]
    MissingForwardState(&'static str),

    #[error("pixel value {value} out of range for {bit_depth}-bit image")]
    PixelRange { value: u32, bit_depth: u8 },

    #[error("unsupported bit depth {0}")]
    UnsupportedBitDepth(u8),

    #[error("csi steps must run in ascending order: expected step {expected}, got {got}")]
    StepOrder { expected: usize, got: usize },

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported container version {0}")]
    Version(u8),

    #[error("model hash mismatch: stream expects {expected:016x}, weights are {actual:016x}")]
    HashMismatch { expected: u64, actual: u64 },

    #[error("image format: {0}")]
    Image(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
