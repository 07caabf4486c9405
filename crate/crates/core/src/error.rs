use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("time step {t} out of range [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("missing handle: {0}")]
    MissingHandle(&'static str),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("file truncated: needed {needed} more bytes")]
    Truncated { needed: usize },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("bad magic bytes: {0:?}")]
    BadMagic([u8; 4]),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
