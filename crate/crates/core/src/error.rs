use std::path::PathBuf;

use ndnet::NdError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] NdError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("{what}: unsupported version {found} (this build reads {expected})")]
    Version { what: &'static str, expected: u16, found: u16 },

    #[error("{what}: truncated ({detail})")]
    Truncated { what: &'static str, detail: String },

    #[error("{what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("record {record_id}: {detail}")]
    InvalidRecord { record_id: String, detail: String },

    #[error(
        "record {record_id} rejected: PGA at sample {pga_index} of {n_samples} leaves fewer than {half} samples \
         on one side of a {duration_s} s window; short records are not zero-padded"
    )]
    Rejected {
        record_id: String,
        pga_index: usize,
        n_samples: usize,
        half: usize,
        duration_s: u32,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("channel {channel} has zero standard deviation in the training data")]
    ZeroStd { channel: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fold plan: {0}")]
    Folds(String),

    #[error("incompatible encoder transfer: {}", .paths.join("; "))]
    Transfer { paths: Vec<String> },

    #[error("checkpoint parameter {name}: {detail}")]
    CheckpointTensor { name: String, detail: String },

    #[error("checkpoint config hash {stored} does not match the current configuration {current}")]
    ConfigHash { stored: String, current: String },

    #[error("non-finite {phase} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize, batch: usize },

    #[error("{0}")]
    EmptySet(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        CoreError::Csv { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::Config(_) => ErrorClass::Usage,
            CoreError::Tensor(_) | CoreError::NonFiniteLoss { .. } | CoreError::ZeroStd { .. } => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }
}
