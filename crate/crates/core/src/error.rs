use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the domain of a special function or density.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller supplied inconsistent shapes or arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical breakdown of the model (all-infinite responsibilities,
    /// unfactorizable covariance, no supported themes).
    #[error("model degeneracy: {0}")]
    Degeneracy(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Every task of a mini-batch was skipped.
    #[error("batch error: {0}")]
    Batch(String),

    #[error("parse error{}: {message}", task.map(|t| format!(" in task {t}")).unwrap_or_default())]
    Parse { task: Option<usize>, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(task: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            task,
            message: message.into(),
        }
    }
}
