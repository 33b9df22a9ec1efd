//! Gradient-based adversarial training for text classification.

pub mod adversary;
pub mod carl;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
