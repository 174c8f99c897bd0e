//! Low-light LDR image enhancement trained from HDR radiance maps.
//!
//! The crate synthesizes `(dark input, fused target)` pairs from HDR images,
//! trains a U-Net style local encoder/decoder augmented with a global
//! encoder branch, and scores results with entropy and TMQI.

pub mod error;
pub mod fusion;
pub mod imageio;
pub mod metrics;
pub mod neuralnet;
pub mod rng;
pub mod scenes;
pub mod synthpipe;
pub mod training;

pub use error::{Error, Result};
