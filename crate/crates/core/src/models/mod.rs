//! Depth-scalable DCGAN generator, discriminator/critic and evaluation
//! classifier.

mod network;
mod spec;

pub use network::{Forward, Layer, Mode, Network, RunningStats, BN_MOMENTUM};
pub use spec::{NetworkSpec, Role, DEFAULT_LATENT_DIM, FEATURE_WIDTH};
