use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value is inconsistent with the data it is applied to.
    #[error("configuration error: {0}")]
    Config(String),
    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    /// Malformed input data (dataset, checkpoint, image).
    #[error("data error at byte {offset}: {msg}")]
    Data { offset: u64, msg: String },
    /// Training diverged.
    #[error("loss became non-finite at step {step} (lr {lr})")]
    Diverged { step: usize, lr: f64 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(offset: u64, msg: impl Into<String>) -> Self {
        Error::Data { offset, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
