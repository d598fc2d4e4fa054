use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read page {path}")]
    PageRead {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot write page {path}")]
    PageWrite {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("unsupported pixel format {format} in {path}: expected 8-bit gray, RGB or RGBA")]
    UnsupportedFormat { path: PathBuf, format: String },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("invalid page spec: {0}")]
    InvalidSpec(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("model format: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
