use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("batch error: {0}")]
    Batch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training error in group `{group}`: {message}")]
    Training { group: String, message: String },
    #[error("training diverged at step {step}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged { step: u64, last_good: Option<PathBuf> },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation failures (bad inputs or configuration) map to exit code 1,
    /// everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidLandmarks(_)
                | Error::InvalidInput(_)
                | Error::InvalidParameter(_)
                | Error::InvalidBox(_)
                | Error::Manifest { .. }
                | Error::Batch(_)
                | Error::Config(_)
                | Error::Metric(_)
                | Error::Data(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
