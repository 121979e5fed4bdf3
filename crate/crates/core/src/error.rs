use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    Dimension {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown id {id} ({kind})")]
    Lookup { kind: &'static str, id: usize },

    #[error("episode for user {user} is over after {horizon} steps")]
    EpisodeOver { user: usize, horizon: usize },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("training diverged at step {step} in {phase}: loss = {loss}")]
    Diverged {
        phase: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
