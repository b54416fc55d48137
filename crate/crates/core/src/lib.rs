//! Patch-based Gaussian-mixture image priors: EM training, Bayesian
//! adaptation to a single image, and half-quadratic-splitting denoising.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod cli;
pub mod denoise;
pub mod em;
pub mod error;
mod fsio;
pub mod gmm;
pub mod image;
pub mod linalg;
pub mod manifest;
pub mod model_io;
pub mod patches;
pub mod pgm;
pub mod sure;
pub mod synthetic;

pub use error::{Error, Result};
pub use gmm::Gmm;
pub use image::ImageBuffer;
pub use patches::PatchSet;
