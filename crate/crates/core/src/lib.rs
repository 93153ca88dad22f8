//! Memory-adaptive depth-wise federated learning simulator.

pub mod analysis;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod memory;
pub mod nn;
pub mod parallel;
pub mod partition;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
