//! Offline reinforcement learning with advantage-guided policy regularization.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices, ReLU networks with exact gradients, Adam.
//! - [`maze`]: a 2D point-mass domain with three rewarded goals.
//! - [`dataset`]: offline dataset synthesis, binary persistence, sampling.
//! - [`vae`]: the advantage-gated conditional VAE behavior model.
//! - [`critic`]: twin Q networks, value network, targets.
//! - [`policy`]: candidate selection, the adaptive constraint, the actor loss.
//! - [`trainer`]: the training loop, variants, checkpoints, metrics.
//! - [`eval`]: rollouts, normalized scores and value diagnostics.

pub mod critic;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod maze;
pub mod numerics;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
