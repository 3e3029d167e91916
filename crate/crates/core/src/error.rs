use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("simulation diverged at step {step}: {detail}")]
    SimulationDiverged { step: usize, detail: String },

    #[error("training diverged at epoch {epoch}: non-finite loss (try a lower learning rate)")]
    TrainingDiverged { epoch: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("too many non-finite draws: {excluded} of {total} excluded")]
    NonFiniteDraws { excluded: usize, total: usize },

    #[error("unsupported format version {found} (this reader understands {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration or input
    /// arguments, as opposed to failures while running a stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Version { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
