//! Controllable image generation and multi-domain image-to-image translation
//! with disentangled latent codes.
//!
//! A single generator/encoder/discriminator triple is trained jointly with
//! reconstruction, mutual-information, supervised, and adversarial losses
//! under a semi-supervised label schedule. The latent code is split into an
//! unstructured part `u` and a structured part `c` (categorical blocks plus
//! continuous factors); editing `c` steers generation and translates existing
//! images between domains.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod latent;
pub mod losses;
pub mod models;
pub mod netspec;
pub mod nn;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic RNG used everywhere; its position can be serialized into
/// checkpoints, which makes resumed runs bit-identical to uninterrupted ones.
pub type Rng = rand_chacha::ChaCha8Rng;
