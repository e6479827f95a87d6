//! Graph neural networks with per-node prediction layers chosen by
//! Mahalanobis distance to per-layer class prototypes.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod metric;
pub mod optim;
pub mod params;
pub mod poison;
pub mod select;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
