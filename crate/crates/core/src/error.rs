use thiserror::Error;

/// Error categories surfaced to the command line as distinct exit codes.
#[derive(Debug, Error)]
pub enum MixarError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("array file error: {0}")]
    ArrayFile(#[from] mixar_autodiff::io::ArrayFileError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = MixarError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> MixarError {
    MixarError::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> MixarError {
    MixarError::Config(msg.into())
}
