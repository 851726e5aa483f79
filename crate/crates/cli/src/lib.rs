//! Experiment runner behind the `hgm` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod models;

pub use commands::{replay, run, Command};
pub use config::Config;
pub use manifest::RunManifest;
