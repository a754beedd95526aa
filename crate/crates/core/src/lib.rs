//! Cue-ablation probes for image classifiers.

pub mod ablation;
pub mod error;
pub mod fcr;
pub mod imagecore;
pub mod rng;
pub mod tasks;
pub mod tinynn;

pub use error::{Error, Result};
