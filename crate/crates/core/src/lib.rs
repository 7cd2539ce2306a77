//! Spike-driven transformer with a spike-compatible mixture-of-experts.
//!
//! The crate provides, bottom up:
//!
//! - [`autodiff`]: a per-pass gradient tape over dense tensors, including
//!   the spike threshold with surrogate backward and the fused binary
//!   attention correlation;
//! - [`neuron`]: leaky integrate-and-fire dynamics and the spiking
//!   normalisation wrapper applied throughout the network;
//! - [`embedding`], [`attention`], [`moe`], [`model`]: the encoder stack:
//!   spiking patch embedding, spike-driven self-attention, prompt-gated
//!   expert routing, and the classifier;
//! - [`optim`], [`train`]: AdamW with cosine schedule and the reproducible
//!   training loop;
//! - [`energy`]: operation-level accumulate vs multiply-accumulate
//!   accounting with energy estimates;
//! - [`data`], [`checkpoint`]: dataset loading/synthesis and binary
//!   checkpoint / array-export formats.
//!
//! All numerics are generic over [`scalar::Scalar`]; the trained artifact
//! runs in `f32` (see the aliases below) while gradient checks instantiate
//! the same code in `f64`.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod neuron;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod spike;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for the trained artifact and all file formats.
pub type Real = f32;

pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Model32 = model::SpikingMoe<f32>;
pub type Model64 = model::SpikingMoe<f64>;
