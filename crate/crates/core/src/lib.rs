//! Rate-utility dataset distillation.
//!
//! Synthetic samples are stored as quantized multiscale latent pyramids that a
//! small per-slice decoder turns into images. A causal Laplace entropy model
//! prices every latent; latents, entropy networks and decoders are optimized
//! jointly against rate plus a distillation loss and finally range-coded into
//! a `.rudd` bitstream whose size gives the bits-per-class metric.

pub mod error;
pub mod codec;
pub mod config;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod entropy_model;
pub mod latents;
pub mod numerics;

pub use error::{Error, Result};
