//! Batch front end: argument parsing and subcommands.

pub mod commands;
pub mod config;

pub use commands::{dispatch, Failure};
pub use config::{parse_config, ParseFailure, RunConfig};
