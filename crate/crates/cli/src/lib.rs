//! Command-line workflows for Gaussian process state-space models: simulate
//! data, fit, forecast, sweep the latent dimension, and self-check a model.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{run, Command, Report};
pub use config::RunConfig;
pub use error::CliError;
