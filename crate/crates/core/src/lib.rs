//! Basis-convolution training engine: a small f64 CNN stack, basis
//! decomposition of conv layers, closed-form operation counts with
//! independent counting oracles, layer-sensitivity search, and the
//! experiment runners that tie them together.

pub mod basisconv;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sensitivity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
