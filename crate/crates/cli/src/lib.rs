//! Command implementations behind the `hazebridge` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
