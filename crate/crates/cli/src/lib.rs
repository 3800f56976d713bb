//! Configuration, checkpoints, metrics and subcommands for the `fedsplit`
//! binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod plot;
pub mod run;

pub use error::{CliError, Result};
