use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DcaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("semantic table does not cover class {0:?}")]
    Coverage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("lookup error: unknown class id {0}")]
    Lookup(usize),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl DcaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcaError::Io { path: path.into(), source }
    }

    /// Whether the error stems from a numerical failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, DcaError::Numeric(_))
    }
}
