//! Reverse-mode differentiation substrate: tensors, define-by-run graphs,
//! Adam, seeded random streams and binary checkpoints.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::grad_check;
pub use graph::{bce_term, sigmoid, Graph, NodeId, PROB_EPS};
pub use params::{ParamSet, INIT_STD};
pub use rng::RngStream;
pub use tensor::Tensor;
