//! Data side of the vegetation forecasting pipeline: the minicube sample
//! model and directory format, a synthetic corpus generator with known
//! rain-driven dynamics, gap filling and normalization, vegetation indices,
//! and image-quality metrics.

pub mod cube;
pub mod error;
pub mod exec;
pub mod indices;
pub mod metrics;
pub mod preprocess;
pub mod rng;
pub mod split;
pub mod synth;

pub use cube::{load_minicube, save_minicube, History, Minicube};
pub use error::{Error, Result};
pub use exec::Execution;
pub use metrics::{MetricsReport, Target};
pub use preprocess::{Augmentation, NormStats};
pub use split::{split_dataset, SplitSpec};
pub use synth::{generate_synthetic_cube, GeneratorConfig};
