use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data or arguments violate a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is unusable (non-PSD covariance, unknown key, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An estimation stage could not produce a result.
    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },
}

impl Error {
    /// True for errors caused by bad inputs rather than by the estimator.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Estimation(_))
    }
}
