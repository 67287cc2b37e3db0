use std::path::PathBuf;

use recoat_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecoatError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("malformed scene: {0}")]
    MalformedScene(String),
    #[error("schema version mismatch: found `{found}`, expected `{expected}`")]
    SchemaVersion { found: String, expected: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RecoatError>;

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RecoatError {
    let path = path.into();
    move |source| RecoatError::Io { path, source }
}

pub(crate) fn json_error(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> RecoatError {
    let path = path.into();
    move |source| RecoatError::Json { path, source }
}
