use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pruning pipeline.
#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("requested {k} items but only {available} are available")]
    InvalidK { k: usize, available: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("all ranks are zero at prune point {point}")]
    DegenerateRanks { point: usize },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("unsupported tensor format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt tensor file: {0}")]
    CorruptFile(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("{stage} failed at entry {entry}: {source}")]
    Stage {
        stage: &'static str,
        entry: usize,
        #[source]
        source: Box<PruneError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PruneError {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        PruneError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, entry: usize) -> Self {
        PruneError::Stage {
            stage,
            entry,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 for configuration problems, 3 for IO and
    /// unreadable tensor files, 2 for everything that goes wrong while computing.
    pub fn exit_code(&self) -> i32 {
        match self {
            PruneError::InvalidConfig(_) | PruneError::Config { .. } => 1,
            PruneError::Io(_) | PruneError::UnsupportedFormat(_) | PruneError::CorruptFile(_) => 3,
            PruneError::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;
