//! Zeroth-order, parameter-free guidance for DDPM samplers.
//!
//! The crate bundles everything needed to run guided restoration at desk
//! scale: a small tensor/derivative engine, noise schedules, trainable toy
//! networks, linear degradation operators, paired differentiable
//! augmentation, the guided samplers and their baselines, quality metrics,
//! and the experiment harness behind the command-line tool.

pub mod augment;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod operators;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::Tensor;
