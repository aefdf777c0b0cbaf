//! Desk-scale vision transformer laboratory with token-label alignment.
//!
//! Mixed training images (CutMix, MixUp, random patch and block-wise mixing)
//! start with one label row per token. Those rows are carried through every
//! attention layer by reusing the attention matrices the forward pass already
//! computed, which yields the soft target the network is trained against.
//!
//! Module map:
//! - [`numerics`]: matrices, softmax, row normalization, seeded RNG
//! - [`vit`]: the toy transformer, its analytic backward pass and checkpoints
//! - [`mixing`]: mixed-sample generation and initial per-token label maps
//! - [`align`]: label propagation through attention, residuals and merging
//! - [`diagnostics`]: token presence, target RMSE, similarity-based ratios
//! - [`trainer`]: soft-target loss, optimizers, training loop, gradient checks

pub mod align;
pub mod diagnostics;
pub mod error;
pub mod image;
pub mod mixing;
pub mod numerics;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use image::Image;
pub use numerics::{Matrix, Real, Rng};
