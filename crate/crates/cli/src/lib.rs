//! Batch pipeline around `qpnet-core`: corpus synthesis, feature extraction,
//! vocoder training and adaptation, spectral conversion, generation and
//! evaluation, all under one run directory with a hashed manifest.

pub mod config;
mod error;
pub mod manifest;
pub mod stages;

pub use config::{ArchPreset, RunConfig};
pub use error::{CliError, CliResult};
pub use stages::{run_all, run_stage, Stage, StageOptions};
