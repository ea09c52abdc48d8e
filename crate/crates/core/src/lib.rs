//! Active open-vocabulary recognition over simulated viewing grids.
//!
//! An agent moves over an `M × N` grid of view embeddings, fuses the frames
//! it has seen with a small attention module and classifies against any
//! vocabulary of text embeddings. The movement policy is a recurrent
//! actor-critic trained with PPO.

pub mod classifier;
pub mod dataset;
pub mod env;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
