use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("modality shape mismatch: rgb {rgb:?} vs thermal {thermal:?}")]
    ModalityShapeMismatch { rgb: [usize; 4], thermal: [usize; 4] },

    #[error("invalid fusion factor: {0}")]
    InvalidFusionFactor(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("label out of range: {label} >= {classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input must be divisible by 32, got {height}x{width}")]
    IndivisibleInput { height: usize, width: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable one-word category used for CLI exit reporting and FFI error codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ModalityShapeMismatch { .. } | Error::Shape(_) | Error::IndivisibleInput { .. } => "shape",
            Error::InvalidFusionFactor(_) | Error::InvalidArgument(_) => "argument",
            Error::NonFinite(_) => "numeric",
            Error::LabelOutOfRange { .. } | Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } | Error::Image { .. } => "io",
        }
    }
}
