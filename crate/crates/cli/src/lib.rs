//! Configuration, file formats and subcommands behind the `sarfusion` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
