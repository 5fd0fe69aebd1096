//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument was outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Mesh ingestion problems (missing UVs, empty mesh, bad indices).
    #[error("mesh error: {0}")]
    Mesh(String),

    /// File format problems in sidecars, checkpoints or manifests.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }
}
