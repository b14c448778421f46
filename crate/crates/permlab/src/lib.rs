//! File formats and the `permlab` command line on top of `permlab-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod report;

pub use error::{CliError, CliResult};
pub use permlab_core as core;
