use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("size mismatch in {path}: header expects {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {path} at byte offset {offset}")]
    NonFinite { path: PathBuf, offset: usize },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("degenerate polygon #{index}: {reason}")]
    Polygon { index: usize, reason: String },

    #[error("ADMM diverged in patch {patch:?} at iteration {iteration} (residual trace: {trace:?})")]
    AdmmDiverged {
        patch: (usize, usize, usize),
        iteration: usize,
        trace: Vec<f64>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source} (completed artifacts: {completed:?})")]
    Stage {
        stage: &'static str,
        completed: Vec<PathBuf>,
        #[source]
        source: Box<Error>,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
