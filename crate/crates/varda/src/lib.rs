//! Unsupervised domain adaptation for image segmentation, built on a small
//! reverse-mode autodiff core.
//!
//! Two variational encoder/decoder pairs (one per domain) share a segmentation
//! head on their latent codes. The source branch trains on labeled images, the
//! target branch on its own predictions, and an explicit squared-L2 distance
//! between the two batches of latent posteriors pulls the domains together.
//! Every analytic quantity (pair kernels, mixture distances, KL terms) has an
//! independent numerical oracle in [`oracle`] so the closed forms can be
//! checked rather than trusted.

pub mod config;
pub mod data;
pub mod gaussian;
pub mod loss;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod verify;

/// Element type for all tensor math. `f64` by default; the `f32` feature
/// switches the whole crate (tests assume `f64` tolerances).
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

/// Dtype code stored in serialized tensors for the active build.
#[cfg(feature = "f32")]
pub const REAL_DTYPE: u8 = 1;
#[cfg(not(feature = "f32"))]
pub const REAL_DTYPE: u8 = 2;

pub const PI: Real = std::f64::consts::PI as Real;
pub const LN_2PI: Real = 1.837_877_066_409_345_4 as Real;

pub use tensor::{Tape, Tensor, TensorError};
