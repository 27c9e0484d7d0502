//! Library half of the `mtcap` binary: run configuration and subcommands.

pub mod commands;
pub mod config;
