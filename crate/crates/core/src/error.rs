use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {key}: {message}")]
    Config { key: String, message: String },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid transition matrix: {0}")]
    InvalidMatrix(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("model file corrupt at byte offset {offset}: {message}")]
    Corrupt { offset: u64, message: String },

    #[error("unsupported model file version {found} at byte offset {offset} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32, offset: u64 },

    #[error("schema mismatch: model schema hash {found}, expected {expected}")]
    SchemaMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch} (learning rate {lr}): loss {loss}")]
    Diverged { epoch: usize, lr: f64, loss: f64 },

    #[error("all {} runs failed: {}", .0.len(), .0.join("; "))]
    AllRunsFailed(Vec<String>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{0}")]
    Unavailable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
