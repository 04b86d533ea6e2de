use thiserror::Error;

/// Errors raised by the inference engine and its file formats.
#[derive(Debug, Error)]
pub enum PiaaError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("zero-norm vector in {section} row {row}")]
    ZeroNorm { section: &'static str, row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("duplicate class name: {0:?}")]
    DuplicateClassName(String),

    #[error("no confident patches: every memory bank is empty")]
    NoConfidentPatches,

    #[error("insufficient purified samples: need at least 2, got {0}")]
    InsufficientSamples(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown class name: {0:?}")]
    UnknownClass(String),

    #[error("evaluation requires labels but the embedding set has none")]
    MissingLabels,
}

pub type Result<T> = std::result::Result<T, PiaaError>;
