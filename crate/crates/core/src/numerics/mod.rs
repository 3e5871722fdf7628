//! Numeric foundation shared by every model: tensors, parameter sets, seeded
//! randomness, Adam, and a finite-difference gradient oracle.

mod activation;
mod adam;
mod finite_diff;
pub mod linalg;
mod params;
mod rng;
mod tensor;

pub use activation::{elu, elu_grad, log_sigmoid, sigmoid, softplus};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use params::ParamSet;
pub use rng::{derive_seed, RngStream};
pub use tensor::Tensor;
