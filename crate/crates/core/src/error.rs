//! Error type shared across the workspace.
//!
//! Variants are grouped by how the CLI reports them: configuration problems
//! exit with code 2, data and file-format problems with code 3, and runtime
//! contract violations with code 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration values.
    #[error("config: {0}")]
    Config(String),

    /// A tensor, block or buffer had the wrong length or dimensions.
    #[error("shape: {0}")]
    Shape(String),

    /// A token id appeared outside the range its modality permits.
    #[error("modality: {0}")]
    Modality(String),

    /// A scalar argument was outside its mathematical domain.
    #[error("domain: {0}")]
    Domain(String),

    /// Variable-length content did not fit its fixed slot.
    #[error("overflow: {0}")]
    Overflow(String),

    /// Assembled sequence would exceed the model's maximum length.
    #[error("capacity: {0}")]
    Capacity(String),

    /// A dataset cannot satisfy a request (too small, wrong modality, ...).
    #[error("data: {0}")]
    Data(String),

    /// A dataset or checkpoint file is malformed.
    #[error("format: {0}")]
    Format(String),

    /// A file failed its integrity checksum.
    #[error("corrupt: {0}")]
    Corrupt(String),

    /// An operation was called in a state that violates its precondition.
    #[error("state: {0}")]
    State(String),

    /// A computation produced NaN or infinity.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data/format, 4 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format(_) | Error::Corrupt(_) | Error::Io(_) => 3,
            Error::Shape(_)
            | Error::Modality(_)
            | Error::Domain(_)
            | Error::Overflow(_)
            | Error::Capacity(_)
            | Error::State(_)
            | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
