//! Sketch-guided latent diffusion for face synthesis.
//!
//! A monochrome sketch is split into five facial regions, each compressed by
//! its own small autoencoder. The region codes are decoded into an 8-channel
//! conditioning map that is concatenated with the noisy 3-channel latent and
//! fed to a denoising U-Net. Images move in and out of latent space through a
//! separately trained convolutional autoencoder.

pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod image_ae;
pub mod nn;
pub mod pipeline;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
