//! Grad-CAM consistency training for a small CNN, with the losses,
//! augmentations, explanation metrics and synthetic data it needs.

pub mod augment;
pub mod cgcloss;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcam;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
