//! Dense neural networks with hand-written backpropagation, batch normalisation and Adam.

mod adam;
mod layers;
mod network;
mod tensor;

pub use adam::AdamState;
pub use layers::{
    BatchNorm, Dense, Layer, LayerKind, LayerSpec, BATCHNORM_EPS, BATCHNORM_MOMENTUM,
};
pub use network::{actor_spec, critic_spec, HeadSpec, Network, NetworkSpec};
pub use tensor::Tensor2;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("backward called without a cached train-mode forward pass")]
    NoForwardCache,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}
