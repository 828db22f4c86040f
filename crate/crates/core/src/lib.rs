//! Neighbor-list generative reranking.

pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod reward;
pub mod trainer;

pub use error::{Error, Result};
