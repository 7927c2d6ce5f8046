//! Neural-process laboratory.
//!
//! Builds a bottleneck set-tokenizer encoder with a hierarchical latent
//! modulated-MLP decoder, trains it on synthetic Gaussian-process regression
//! tasks, and ships the comparison baselines, evaluation protocol, and
//! experiment harness needed to reproduce the 1D benchmark at desk scale.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
