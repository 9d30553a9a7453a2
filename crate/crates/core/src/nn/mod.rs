//! Minimal CONV/ReLU/max-pool/FC/softmax training engine.

pub mod data;
pub mod network;
pub mod train;

pub use data::{load_idx, synthetic_digits, Dataset};
pub use network::{
    backward, forward, loss_and_gradients, ConvSpec, Gradients, LayerDef, LayerGeometry, LayerGrads, NetworkDef,
    Precision, TrainingBatch,
};
pub use train::{evaluate, predict, sgd_step, BatchSampler, LayerMasks, Sgd};
