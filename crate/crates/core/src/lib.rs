//! Label-conditioned, cycle-consistent tumour inpainting.
//!
//! A dual-pathway generator translates anatomy images into tumour-channel
//! images with lesions placed on an imposed label map. Training combines
//! adversarial, cycle, pair-wise and frozen-segmentor terms; the crate also
//! carries the evaluation and augmentation protocols and a procedural
//! phantom corpus for end-to-end checks.

pub mod critics;
pub mod downstream;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metgen;
pub mod metrics;
pub mod nn;
mod rng;
pub mod segmentor;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
