//! Identity-aware multi-scale face super-resolution.
//!
//! A residual generator produces one image per x2 upsampling stage; a pair
//! discriminator labels (reference, candidate) pairs as fake, genuine or
//! imposter. Training combines perceptual, color-consistency and adversarial
//! face-verification losses.

pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod discriminator;
mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
pub use halluc_tensor as tensor;
