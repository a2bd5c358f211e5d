use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel {channel} has zero mass; normalization is undefined")]
    ZeroMassChannel { channel: usize },

    /// Pixels that would leave `[0, 1]`, as `(flat index, overshoot)` pairs.
    #[error("{} pixel(s) outside [0, 1], worst overshoot {worst:.3e}", pixels.len())]
    RangeViolation { pixels: Vec<(usize, f64)>, worst: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("instance has {n} pixels; at most {max} are supported")]
    InstanceTooLarge { n: usize, max: usize },

    #[error("dual variable became non-finite after {sweeps} sweeps")]
    NumericalOverflow { sweeps: usize },

    #[error("gradient is identically zero")]
    ZeroGradient,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: file truncated ({needed} bytes needed, {available} available)")]
    TruncatedFile { path: PathBuf, needed: usize, available: usize },

    #[error("{images} images but {labels} labels")]
    LabelImageCountMismatch { images: usize, labels: usize },

    #[error("malformed document: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
