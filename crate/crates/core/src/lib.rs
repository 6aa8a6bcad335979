//! Attribution-robustness laboratory: higher-order autodiff, toy classifiers,
//! attribution attacks, curvature probes and training strategies.

pub mod attack;
pub mod attribution;
pub mod autodiff;
pub mod curvature;
pub mod error;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
