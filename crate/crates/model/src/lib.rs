//! Latent diffusion forecaster for vegetation minicubes.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod sampler;
pub mod trainer;
pub mod vae;
pub mod vegenet;

pub use checkpoint::{DenoiserCheckpoint, VaeCheckpoint};
pub use sampler::{ensemble_forecast, forecast, SampleOptions};
pub use error::{Error, Result};
