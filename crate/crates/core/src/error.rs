use std::path::PathBuf;

use crate::container::ContainerError;
use crate::diffcore::TensorError;
use crate::fourier::FourierError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("prompt does not match the layer plan: {0}")]
    PromptLayout(String),
    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Diverged { epoch: usize, what: String },
    #[error("{0} is empty")]
    Empty(String),
    #[error("data isolation violated: {0}")]
    Isolation(String),
    #[error("time step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
        move |e| Error::AtStep {
            step,
            source: Box::new(e),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
