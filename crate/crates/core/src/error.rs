use thiserror::Error;
use vsd_tensor::TensorError;

#[derive(Debug, Error)]
pub enum VsdError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("svg line {line}: {msg}")]
    Svg { line: usize, msg: String },
    #[error("sample `{id}`: {msg}")]
    Sample { id: String, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("image: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VsdError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(VsdError::Invalid(msg.into()))
}

impl From<image::ImageError> for VsdError {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(io) => VsdError::Io(io),
            other => VsdError::Image(other.to_string()),
        }
    }
}
