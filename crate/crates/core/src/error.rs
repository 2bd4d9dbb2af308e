use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN/Inf produced or consumed by a numeric kernel.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid model, training, or pipeline configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Misuse of the autodiff graph (non-scalar loss, repeated backward, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Malformed PGM, checkpoint, manifest, or report file.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Dataset contents that violate the expected layout or labelling.
    #[error("data error: {0}")]
    Data(String),

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Maps an IO error, turning `NotFound` into [`Error::NotFound`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures caused by user input (bad paths, files, or flags)
    /// rather than by a numeric or internal fault.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::Data(_)
                | Error::NotFound(_)
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}
