//! Library side of the `asuka-lab` command: config schema, run directories,
//! subcommands, reports and plots.

pub mod cli;
pub mod commands;
pub mod config;
pub mod plot;
pub mod report;
pub mod run;

pub use cli::main_with;
