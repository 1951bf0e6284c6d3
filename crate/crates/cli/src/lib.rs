//! Configuration and commands behind the `ambisql` binary.

pub mod commands;
pub mod config;
