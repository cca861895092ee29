//! Toy transformer engine and analytics for activation sparsity: exact
//! FFN activation families, ReLU surgery, sparsity-aware MAC accounting,
//! aggregated sparsity, weight reuse during generation, shifted ReLU and a
//! sparse speculative-decoding latency model.

pub mod activations;
pub mod cli;
pub mod error;
pub mod flops;
pub mod instrument;
pub mod linalg;
pub mod model;
pub mod reuse;
pub mod specdec;
pub mod train;

pub use error::{Error, Result};
