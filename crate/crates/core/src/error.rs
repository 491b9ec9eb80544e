use std::path::{Path, PathBuf};

use crate::training::TrainingHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("length mismatch: {scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },

    #[error("held-out dataset {dataset} reached training ({context})")]
    HeldOut { dataset: String, context: String },

    #[error("non-finite loss in phase {phase}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        phase: usize,
        epoch: usize,
        batch: usize,
        history: Box<TrainingHistory>,
    },

    #[error("backbone weights unavailable: {0}")]
    Weights(String),

    #[error("checkpoint config mismatch in {fields:?}\n  checkpoint: {saved}\n  expected:   {expected}")]
    CheckpointMismatch {
        fields: Vec<String>,
        saved: String,
        expected: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    /// Process exit code: 2 for configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::HeldOut { .. } | Error::CheckpointMismatch { .. } => 2,
            _ => 1,
        }
    }
}

impl From<fundus_nn::io::IoError> for Error {
    fn from(e: fundus_nn::io::IoError) -> Self {
        Error::Checkpoint(e.to_string())
    }
}
