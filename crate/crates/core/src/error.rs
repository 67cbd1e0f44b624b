use thiserror::Error;

use crate::data::DataError;
use crate::linalg::LinalgError;
use crate::nn::NnError;
use crate::optimize::OptimError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("trunk matrix is rank deficient on the training sensors ({0}); reduce N or add output sensors")]
    RankDeficientTrunk(LinalgError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("output sensors {first} and {second} coincide")]
    DuplicateSensor { first: usize, second: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("target has zero norm")]
    ZeroTarget,
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
