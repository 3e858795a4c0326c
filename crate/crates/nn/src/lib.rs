//! A small `f64` reverse-mode automatic differentiation tape with the layers
//! needed by the captioning network (conv blocks, LSTMs, attention) and an
//! AdamW optimiser. Everything runs single-threaded and is deterministic.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{BufferUpdate, Gradients, Graph, NodeId};
pub use optim::AdamW;
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("serialization error: {0}")]
    Serialize(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
