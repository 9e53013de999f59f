use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QuantError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("quantizer state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("feature map cap of {cap_bytes} bytes is infeasible for layer `{layer}` ({elements} elements need at least {needed} bytes at 2 bits)")]
    InfeasibleCap {
        layer: String,
        elements: usize,
        cap_bytes: usize,
        needed: usize,
    },

    #[error("corrupt model entry `{entry}`: {reason}")]
    CorruptModel { entry: String, reason: String },

    #[error("model manifest parse error (format version {version}): {reason}")]
    ManifestParse { version: u32, reason: String },

    #[error("IDX parse error at byte offset {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl QuantError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QuantError::Io {
            path: path.into(),
            source,
        }
    }
}
