//! Minimal CPU neural-network engine: tensors on a tape, a handful of ops,
//! and SGD.

mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, Sgd, SgdConfig};
pub use params::{ParamId, ParamStore};
