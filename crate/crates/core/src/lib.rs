//! Cross-age reference-based face restoration at desk scale.
//!
//! Identity-conditioned pixel-space diffusion trained on synthetic faces,
//! plus training-free age control at inference time.

pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod filters;
pub mod guidance;
pub mod image;
pub mod layers;
pub mod seed;
pub mod synthlab;

pub use error::{Error, Result};
pub use image::{BinaryMask, ImageTensor};
