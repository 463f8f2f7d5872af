//! Multi-problem pre-training and federated single-problem fine-tuning of a compact
//! attention policy for vehicle routing variants.

pub mod baseline;
pub mod env;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod merge;
pub mod policy;
pub mod train;
pub mod vrp;

pub use error::{Error, Result};
