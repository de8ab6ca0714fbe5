//! Operator surface for modalfuse: configuration files, checkpoints and
//! the `train`, `sample`, `eval` and `ablate` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsio;

pub use error::CliError;
