use std::path::PathBuf;

pub type Result<T, E = DibsError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DibsError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of length {len}")]
    OutOfRange { what: &'static str, index: usize, len: usize },

    #[error("{path}: magic mismatch (expected {expected:#010x}, found {found:#010x})")]
    IdxMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("count mismatch: {images} images but {labels} labels")]
    IdxCount { images: usize, labels: usize },

    #[error("{path}: truncated file (expected {expected} bytes, found {found})")]
    IdxTruncated { path: PathBuf, expected: usize, found: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DibsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }
}
