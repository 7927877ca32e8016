//! Text-conditioned latent diffusion for tiled histology-like images.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`schedule`]: noise schedules, forward noising, DDIM stepping, guidance and the sampling loop.
//! - [`vae`]: vector-quantised autoencoder with configurable downsampling.
//! - [`conditioning`]: tokenizer, captions, class labels and the cyclical long-prompt text encoder.
//! - [`denoiser`]: the latent U-Net and its training loop.
//! - [`summarizer`]: two-call report summarisation against a chat-completion transport.
//! - [`metrics`]: Fréchet distance/FID, SSIM, MSE and the classification accuracy score.
//! - [`data`]: tiling, slide splits, manifests and the procedural toy corpus.
//! - [`config`] and [`pipeline`]: run configuration and end-to-end experiment drivers.

pub mod conditioning;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod summarizer;
pub mod vae;

pub use error::{Error, Result};
