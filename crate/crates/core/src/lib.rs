//! Relevance-propagation parameter attribution for decoder-only
//! transformers, and attribution-gated continual fine-tuning built on it.

pub mod analysis;
pub mod attribution;
pub mod container;
pub mod error;
pub mod importance;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod tasks;
pub mod tensors;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};
