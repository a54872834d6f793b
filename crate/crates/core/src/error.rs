use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or layer geometry do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// Malformed `.flo`, checkpoint or manifest content.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
