//! Tissue oxygen saturation (StO2) estimation from simulated RGB images and
//! sparse fibre-probe hyperspectral signals.
//!
//! The pipeline synthesizes inputs from hyperspectral cubes, derives
//! ground-truth StO2 with a modified Beer-Lambert regression, trains a
//! dual-input conditional GAN and evaluates it with SSIM, mean prediction
//! error and the high-accuracy pixel fraction.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fibre;
pub mod gan;
pub mod hypercube;
pub mod metrics;
pub mod nn;
pub mod oximetry;
pub mod raster;

pub use error::{Error, Result};
