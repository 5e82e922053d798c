//! MI-Net: single-image dehazing built around implicit-Euler fixed-point
//! blocks, with its own reverse-mode autodiff, stability diagnostics,
//! synthetic haze data, and a training pipeline.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod haze;
pub mod im_block;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod runconfig;
pub mod stability;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
