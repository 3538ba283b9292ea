use std::path::PathBuf;

use thiserror::Error;

use crate::promptgen::DescriptionRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("template error: {0}")]
    Template(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("backend error: {0}")]
    Backend(String),

    /// The backend gave up part-way; the records produced so far survive.
    #[error("description generation stopped after {} records: {source}", completed.len())]
    Partial {
        completed: Vec<DescriptionRecord>,
        #[source]
        source: Box<Error>,
    },

    #[error("report error: {0}")]
    Report(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} ({detail}); last good checkpoint: {}",
        last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFinite {
        step: u64,
        detail: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
