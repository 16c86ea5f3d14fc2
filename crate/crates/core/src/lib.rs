//! One-to-many perceptual super-resolution.
//!
//! A noise-injected RRDB generator trained with a cycle-consistency content
//! loss, a perceptual loss and an LR-conditioned relativistic discriminator,
//! fed by a blur-filtered patch pipeline.

mod error;

pub mod cli;
pub mod data;
pub mod discriminator;
pub mod features;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
