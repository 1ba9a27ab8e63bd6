//! Minimal double-precision network kernel: dense and 2-D convolution
//! layers, ReLU, mean squared error, SGD with momentum, and
//! finite-difference gradient checks.

mod gradcheck;
mod layer;
mod network;
mod optim;
pub mod persist;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, max_relative_error, numeric_gradients, relative_error};
pub use layer::Layer;
pub use network::{Gradients, Network, Parameterized, Trace};
pub use optim::{Sgdm, StepDecay};
pub use tensor::{mse, mse_grad, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("layer {index} ({kind}): expected input {expected}, got shape {got:?}")]
    LayerInput {
        index: usize,
        kind: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter file: {0}")]
    Format(String),
}
