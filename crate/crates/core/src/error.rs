use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("channel mismatch: network expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("conditioning mode {requested} is incompatible with checkpoint trained for {available}")]
    ModeMismatch { requested: String, available: String },

    #[error("non-finite value encountered in {context} at step {step}")]
    Numerical { context: String, step: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("unsupported version `{found}` in {path} (expected `{expected}`)")]
    UnsupportedVersion { path: String, found: String, expected: String },

    #[error("output directory {0} is not empty (pass force to overwrite)")]
    OutputDirNotEmpty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch { expected: expected.to_vec(), got: got.to_vec() }
    }
}
