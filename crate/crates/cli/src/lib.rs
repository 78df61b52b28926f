//! Command line and HTTP service wiring for the `ccgp` pipeline.

pub mod commands;
pub mod files;
pub mod service;

pub use commands::{run, Cli};
