//! Evaluation protocols for the forecaster: reference baselines, scoring
//! against gap-filled truth, lead-time curves, module and variable
//! ablations, meteorological what-if runs, and report bundles.

pub mod ablation;
pub mod baselines;
pub mod error;
pub mod report;
pub mod scoring;
pub mod stats;
pub mod whatif;

pub use error::{Error, Result};
