use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid timestep order: t={t}, t_prev={t_prev}")]
    TimestepOrder { t: usize, t_prev: i64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown label code {0}")]
    UnknownLabel(i64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("missing data: {0}")]
    Missing(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("{} input(s) failed:\n{}", .0.len(), join_lines(.0))]
    Inputs(Vec<Error>),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_lines(errors: &[Error]) -> String {
    errors.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n")
}

impl Error {
    pub fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Divergence { .. } => false,
            Error::Inputs(all) => all.iter().all(Error::is_user_error),
            _ => true,
        }
    }
}
