//! Vector-quantized autoencoder with spherical codebook quantization,
//! norm-bounded codebook rows and an additive angular margin loss, on a
//! small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pnm;
pub mod probe;
pub mod quantizer;
pub mod suites;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
