//! Structured pruning and quantization of small CNNs via ADMM, exact
//! bit-serial convolution, and simulation of the compressed model on a
//! SOT-MRAM processing-in-memory layout with a parameterized cost model.

pub mod admm;
pub mod bitserial;
pub mod config;
pub mod cost;
pub mod error;
pub mod io;
pub mod mapper;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod sparsity;
pub mod verify;

pub use error::{Error, Result};
pub use model::{LayerKind, LayerParams, LayerShape, Model, QuantSpec, SparsityReport, WeightTensor4D};
