//! Graph neural network forecasters for epidemic case counts.

pub mod baselines;
pub mod colagnn;
pub mod data;
pub mod error;
pub mod harness;
pub mod parallel;
pub mod epignn;
pub mod hybridgnn;
pub mod model;
pub mod rnn;
pub mod synthetic;
pub mod tensor;
#[cfg(test)]
mod testutil;

pub use error::{DataError, ModelError, TensorError};
pub use tensor::{Graph, ParamSet, Tensor, Var};
