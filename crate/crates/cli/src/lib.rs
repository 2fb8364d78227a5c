//! Library side of the `jlwsod` command: configuration and the
//! subcommands, callable from tests.

pub mod commands;
pub mod config;

pub use config::RunConfig;
