use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("group index is stale: {0}")]
    StaleIndex(String),

    #[error("every backbone layer is fully zero; lambda is too large")]
    AllZeroPattern,

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown tap layer {0}")]
    UnknownTap(usize),

    #[error("duplicate task `{0}`")]
    DuplicateTask(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
