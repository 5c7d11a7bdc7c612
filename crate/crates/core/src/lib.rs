//! In-context classification with single-layer self-attention.
//!
//! Modules, bottom-up:
//! - [`numerics`]: matrices, stable softmax, seeded RNG.
//! - [`taskgen`]: synthetic spherical classification contexts.
//! - [`attention`]: linear / kernel / softmax self-attention forward passes
//!   and the weight constructions that turn them into gradient-descent steps.
//! - [`baselines`]: the closed-form one-step GD, kernel GD and
//!   context-adaptive kernel GD predictors.
//! - [`training`]: cross-entropy, exact gradients, Adam, training loop.
//! - [`analysis`]: alignment metrics, grid search, constant extraction.

pub mod error;
pub mod numerics;
pub mod taskgen;
pub mod attention;
pub mod baselines;
pub mod training;
pub mod analysis;

pub use error::{Error, Result};
