//! Command-line pipeline: synthetic data, preprocessing, fold training,
//! selection, ensemble prediction and evaluation.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::run;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
