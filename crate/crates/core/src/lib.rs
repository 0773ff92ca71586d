//! Deterministic simulator for sampled, sharded margin-softmax classification
//! layers: sampling, simulated model parallelism, synthetic data, diagnostics,
//! a toy trainer and a closed-form cost model.

pub mod cli;
pub mod config;
pub mod costmodel;
pub mod datasynth;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod numerics;
pub mod sampler;
pub mod shardsim;
pub mod trainer;

pub use error::{Error, Result};
