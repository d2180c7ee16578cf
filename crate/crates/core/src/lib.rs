//! ID-conditioned latent diffusion for SMPL-style UV texture maps.
//!
//! The crate covers the full desk-scale pipeline: diffusion math and DDIM
//! sampling, a small denoiser with a decoupled cross-attention face-fusion
//! block, pluggable text/face/classifier encoders with deterministic
//! reference implementations, prior-preservation fine-tuning, a software UV
//! rasterizer, the four texture-quality metrics, and the generate-and-select
//! dataset pipeline.

pub mod attention;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image_buf;
pub mod rng;

pub use error::{Error, Result};
