//! File formats, synthetic data, toy control extractors and the
//! `controlvideo` command line built on the `controlvideo` engine.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod controls;
mod error;
pub mod ppm;
pub mod runner;
pub mod synth;
pub mod tensorfile;

pub use commands::{run, Command, Outcome};
pub use config::RunConfig;
pub use error::{CliError, Result};
