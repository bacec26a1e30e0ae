//! Error types shared across the crate.

use std::io;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/volume dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Operation not valid in the current state (e.g. frozen template bank).
    #[error("invalid state: {0}")]
    State(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// File does not start with the expected magic bytes.
    #[error("bad magic")]
    BadMagic,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    /// Payload shorter (or longer) than the header declares.
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: u64, got: u64 },

    /// Declared dimensions overflow the addressable size.
    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    /// Generic malformed-content error for structured files.
    #[error("format error: {0}")]
    Format(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}
