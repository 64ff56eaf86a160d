//! Coupled sparse Tucker factorization trained with lock-free parallel SGD.
//!
//! A sparse N-order tensor is factorized as a small core multiplied by one
//! factor matrix per mode. Optional side matrices share a factor with one
//! tensor mode, which lets them inform the decomposition of sparse data.

pub mod algebra;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod model_io;
pub mod par;
pub mod rng;
pub mod scaling;
mod shared;
pub mod synth;
pub mod trainer;

pub use algebra::{CoreStructure, CoreTensor, Coupling, FactorMatrix, FactorModel};
pub use data::{split_train_test, CoupledMatrix, DataBundle, ModeIndexCounts, SparseTensor};
pub use error::{Error, Result};
pub use eval::{evaluate, objective_value, test_rmse, EvalReport};
pub use trainer::{
    finalize, initialize, run_epoch, train, train_with, ConvergenceLog, InitScale, Kernel, LogEntry, TrainConfig,
    TrainOutput, TrainState,
};
