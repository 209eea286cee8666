//! Multi-expert distribution calibration for long-tailed multi-label
//! video classification, on a small f64 autodiff engine.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{MedcError, Result};
pub use tensor::Tensor;
