//! Command-line front end: argument parsing, layered run configuration and
//! the subcommand implementations.

pub mod args;
pub mod bench;
pub mod commands;
pub mod error;
pub mod run_config;
