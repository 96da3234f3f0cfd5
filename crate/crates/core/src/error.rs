use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("trajectory {trajectory}: {field}: {message}")]
    InvalidTrajectory {
        trajectory: usize,
        field: &'static str,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no overlap: all truncated importance weights are zero")]
    NoOverlap,

    #[error("policy returned invalid probability {value} for action {action}")]
    InvalidProbability { action: usize, value: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bootstrap unstable, insufficient overlap ({dropped} of {total} resamples degenerate)")]
    BootstrapUnstable { dropped: usize, total: usize },

    #[error("training aborted at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (CLI exit code 1), as opposed
    /// to failures while running (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvalidTrajectory { .. }
                | Error::InvalidInput(_)
                | Error::EmptyDataset
                | Error::Unsupported(_)
                | Error::MissingArtifact(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
