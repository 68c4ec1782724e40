use std::path::PathBuf;

use dgdata_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("state error: {0}")]
    State(String),
    #[error("batch composition error: {0}")]
    BatchComposition(String),
    #[error("training diverged at epoch {epoch} in {component}: {detail}")]
    Divergence {
        epoch: usize,
        component: String,
        detail: String,
    },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint version {found} is incompatible with supported version {supported}")]
    Incompatible { found: u32, supported: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) | CoreError::Json(_) => 2,
            CoreError::Nn(NnError::Config(_)) => 2,
            CoreError::Data(_)
            | CoreError::Schema(_)
            | CoreError::Label(_)
            | CoreError::Csv(_)
            | CoreError::BatchComposition(_) => 3,
            CoreError::Divergence { .. } | CoreError::Nn(NnError::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}
