//! Patch-based hard-exudate segmentation for retinal fundus images.
//!
//! The pipeline has four stages, each in its own module:
//!
//! * [`dataset`] resizes fundus images and ground-truth masks to 256×256 and
//!   extracts class-balanced 32×32 patches labelled by their center pixel.
//! * [`nn`] and [`training`] implement an eight-convolution classifier with
//!   hand-written backward passes, softmax cross-entropy and Adam, driven by
//!   a shard/streak schedule.
//! * [`inference`] slides the classifier over every valid center of an image
//!   and reassembles a 224×224 (or zero-padded 256×256) mask.
//! * [`metrics`] tabulates predicted-by-actual confusion matrices and the
//!   derived recalls.
//!
//! All numeric work runs on [`tensor::Tensor`] in [`Real`] precision
//! (64-bit unless the `f32` feature is enabled).

pub mod container;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Real, Tensor};

/// Side length of a square training/inference patch.
pub const PATCH_SIZE: usize = 32;
/// Offset of the labelled pixel inside a patch (0-indexed).
pub const PATCH_CENTER: usize = PATCH_SIZE / 2;
/// Working resolution every image and mask is resized to.
pub const WORKING_SIZE: usize = 256;
/// Number of valid centers per axis when no image padding is applied.
pub const VALID_EXTENT: usize = WORKING_SIZE - PATCH_SIZE;
/// Color channels in a fundus image.
pub const CHANNELS: usize = 3;
