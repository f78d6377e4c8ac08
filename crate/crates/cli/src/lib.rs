//! Command-line front end: experiment files, subcommands and artifacts.

pub mod build;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{ConfigError, ConfigFile, Settings};
pub use error::CliError;
