//! Training classifiers whose input-gradients are aligned with target-class
//! directions, attacking them with projected gradient descent, and the
//! higher-order autodiff core both rely on.

pub mod attack;
pub mod autodiff;
pub mod data;
mod error;
pub mod loss;
pub mod model;
pub mod reps;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
