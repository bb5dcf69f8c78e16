//! Experiment harness: config parsing, file formats, results and the phases
//! behind the `erasure-lab` subcommands.

pub mod config;
pub mod files;
pub mod plot;
pub mod results;
pub mod run;

pub use config::{parse_config, parse_config_str, GateConfig, RunConfig};
pub use run::{Context, EraseOptions, ModelChoice};
