//! Experiment harness: JSON configuration, run directories with manifests,
//! CSV artifacts, SVG plots, and the commands behind the `icl-lab` CLI.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod plot;

pub use config::ExperimentConfig;
pub use error::{LabError, LabResult};
