//! Command-line pipeline and HTTP service for protomail checkpoints.

pub mod commands;
pub mod config;
pub mod service;

pub use commands::{run, Cli};
