//! Adversarial concept erasure for conditional diffusion models, at desk scale.
//!
//! A conditional DDPM is trained on a labelled Gaussian mixture in low
//! dimension, then edited so that its outputs become statistically independent
//! of a target concept flag. Every quantity the erasure claims to control
//! (mutual information, total variation, Bayes error, probe accuracy) is
//! measured against ground truth that the synthetic setting makes available.

pub mod error;
pub mod adversary;
pub mod data;
pub mod diffusion;
pub mod erasure;
pub mod harness;
pub mod infotheory;
pub mod metrics;
pub mod nn;

pub use error::{LabError, Result};
