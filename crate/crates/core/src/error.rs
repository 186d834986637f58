use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across data handling, modelling and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {file}: {message}")]
    Load { file: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Load {
            file: file.into(),
            message: message.into(),
        }
    }

    /// True for failures that originate in the filesystem rather than in the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Load { message, .. } => message.starts_with("missing file"),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
