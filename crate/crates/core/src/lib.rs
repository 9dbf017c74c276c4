//! Variational fusion of RGB and thermal feature maps for semantic segmentation.
//!
//! Two encoders produce five-level feature pyramids; at every level a fusion
//! block blends the two modalities through a per-pixel factor generated from
//! a sampled Gaussian latent, regularized toward a prior conditioned on pixel
//! category and scene illumination. Layers carry explicit forward and
//! backward passes in `f64`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod priors;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
