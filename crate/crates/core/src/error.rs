use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("order error: {0}")]
    Order(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("request error: {0}")]
    Request(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than the configuration
    /// or the training run.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Schema(_)
                | Error::Order(_)
                | Error::Io { .. }
                | Error::Checkpoint(_)
                | Error::Request(_)
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Domain(_) | Error::Transfer(_)
        )
    }

    pub fn is_training_error(&self) -> bool {
        matches!(
            self,
            Error::Training(_) | Error::Pipeline(_) | Error::Numeric(_) | Error::Oracle(_)
        )
    }
}
