use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    #[error("bad value for configuration key `{key}`: {reason}")]
    ConfigValue { key: String, reason: String },

    #[error("checkpoint schema error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, iteration {iter}; last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        iter: usize,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
