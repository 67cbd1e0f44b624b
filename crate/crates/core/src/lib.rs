//! DeepONet operator learning with monolithic and two-step training.
//!
//! The crate is organized bottom-up: dense linear algebra ([`linalg`]),
//! networks with reverse mode ([`nn`]), Adam ([`optimize`]), the DeepONet
//! model ([`deeponet`]), training procedures ([`train`]), the explicit
//! interpolating trunk ([`construct`]), finite-difference data ([`data`]),
//! and test-time metrics ([`eval`]).

pub mod data;
pub mod deeponet;
pub mod construct;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod optimize;
pub mod train;

pub use data::{DataError, OperatorDataset};
pub use deeponet::DeepONetModel;
pub use error::{Error, Result};
pub use linalg::{LinalgError, Matrix};
pub use nn::{Activation, InitScheme, Mlp, NnError};
pub use optimize::{AdamConfig, LrSchedule, OptimError};
pub use train::{BranchSolver, Method, TrainConfig, TrainReport};
