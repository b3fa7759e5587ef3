use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sample `{id}` is missing its {channel} channel")]
    MissingChannel { id: String, channel: String },

    #[error("dimension mismatch between channels at {}", .file.display())]
    DimensionMismatch { file: PathBuf },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("segmentor must be frozen before it is used as a loss")]
    SegmentorNotFrozen,

    #[error("paired loss requested on an unpaired batch")]
    UnpairedBatch,

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
