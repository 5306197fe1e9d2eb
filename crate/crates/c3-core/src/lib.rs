//! Overfitted neural codec for single images and short videos.
//!
//! Each input is compressed by fitting a tiny synthesis network plus a
//! hierarchy of latent grids to that one input, quantizing everything, and
//! entropy-coding latents and network parameters under an autoregressive
//! Laplace model. Decoding replays the entropy model and synthesis exactly;
//! every arithmetic step on the coded path is deterministic and
//! platform-independent.

pub mod coding;
pub mod config;
pub mod error;
pub mod laplace;
pub mod math;
pub mod model;
pub mod quant;
pub mod rng;
pub mod train;
pub mod tensor;
