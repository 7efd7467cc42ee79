use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {value} at pixel (x={x}, y={y}) is out of range for {classes} classes")]
    ClassOutOfRange {
        x: usize,
        y: usize,
        value: u8,
        classes: usize,
    },

    #[error("invalid probability map: {0}")]
    InvalidProbMap(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("png error on {path}: {reason}")]
    Png { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },

    #[error("acquisition error: {0}")]
    Acquisition(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
