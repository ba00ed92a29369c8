//! Experiment runner behind the `attnembed` binary.

pub mod config;
pub mod error;
pub mod run;

pub use config::{load_config, RunConfig, SEED_ENV};
pub use error::{CliError, Result};
pub use run::{run, Command, Outcome};
