//! Soft mixture-of-LoRA-experts over a frozen transformer encoder, with
//! masked-prediction continual training on k-means pseudo-labels, replay
//! mixing, and forgetting / expert-activation analysis. Desk scale, f64,
//! deterministic by construction.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod milore;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{bind_all, collect_grads, Binding, Param, ParamStore};
pub use tensor::Tensor;
