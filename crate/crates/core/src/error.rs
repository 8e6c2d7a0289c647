use std::path::PathBuf;

use thiserror::Error;

use crate::nifti::NiftiError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("spatial extents {extents:?} must be divisible by {divisor}")]
    Indivisible { extents: [usize; 3], divisor: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-finite loss at step {step} (lr {lr}): total {total}, dice {dice}, ce {ce}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        total: f64,
        dice: f64,
        ce: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
