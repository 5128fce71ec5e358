use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("timestep {t} outside 1..={max}")]
    Step { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("level undefined for an all-zero signal")]
    UndefinedLevel,

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("attack failed at iteration {iteration}: {detail}")]
    Attack { iteration: usize, detail: String },

    #[error("purification failed: {0}")]
    Purification(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Codec { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn codec(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Codec {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}
