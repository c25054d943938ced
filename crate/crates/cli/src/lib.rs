//! Configuration handling and subcommand implementations behind the
//! `treeres` binary.

pub mod commands;
pub mod config;
