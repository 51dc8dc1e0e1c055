use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("batch-norm statistics are not initialized ({0})")]
    UninitializedStats(String),

    #[error("graph mode error: {0}")]
    GraphMode(String),

    #[error("wav format error in {path}: {reason}")]
    WavFormat { path: PathBuf, reason: String },

    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("model file is corrupt: {0}")]
    Corrupt(String),

    #[error("unsupported model file version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
