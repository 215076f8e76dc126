use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::GraphError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error("malformed {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss diverged at step {step}: {source}")]
    Diverged { step: usize, source: GraphError },
    #[error("teacher reached held-out accuracy {achieved:.4}, below the floor {floor:.4}")]
    TeacherFloor { achieved: f64, floor: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            Error::MissingArtifact(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::MissingArtifact(_) | Error::Incompatible(_) | Error::Format { .. } => 3,
            Error::Graph(_)
            | Error::Tensor(_)
            | Error::Diverged { .. }
            | Error::TeacherFloor { .. } => 4,
            Error::Io { .. } => 1,
        }
    }
}
