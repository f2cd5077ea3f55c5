use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MgcotError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MgcotError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("attention row has no unmasked entries")]
    EmptyAttention,

    #[error("contrastive loss needs a batch of at least 2 sessions, got {0}")]
    NoDerangement(usize),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

impl MgcotError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MgcotError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        MgcotError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
