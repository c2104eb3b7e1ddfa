use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A point or depth was at or behind the camera plane.
    #[error("non-positive depth: {0}")]
    NonPositiveDepth(f64),

    /// Matrix or feature-vector dimensions do not line up.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Two BEV maps with different extents or cell sizes were combined.
    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    /// Bad magic bytes or unsupported version in a cache file.
    #[error("format error: {0}")]
    FormatError(String),

    /// A cache file payload is truncated or inconsistent.
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    /// Invalid configuration (empty ranges, negative rates, bad camera...).
    #[error("config error: {0}")]
    ConfigError(String),

    /// A metric group has no member classes.
    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
