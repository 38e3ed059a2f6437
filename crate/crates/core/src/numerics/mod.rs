//! Dense math, ReLU networks with exact gradients, Adam, and a
//! finite-difference oracle.

pub mod adam;
pub mod codec;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, ParamVector};
pub use matrix::Matrix;
pub use mlp::{ActivationCache, Dense, Mlp, MlpParams, MlpSpec, OutputActivation, ParamGrads};
