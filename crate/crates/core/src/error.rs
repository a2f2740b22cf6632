use std::path::PathBuf;

use mmcap_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("data error: {0}")]
    Data(String),

    /// A malformed record in a line-oriented input file.
    #[error("{}:{line}: {message}", path.display())]
    Record { path: PathBuf, line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
