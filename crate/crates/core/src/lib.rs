//! Knowledge distillation for GAN generators at desk scale.
//!
//! A large "teacher" generator is trained adversarially, then a small
//! "student" generator is fit to it with a pixel MSE loss (optionally mixed
//! with the adversarial loss). Quality is measured with Inception Score,
//! Fréchet distance on classifier features, and variance of the Laplacian.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
