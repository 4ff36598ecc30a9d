//! Command-line entry points and the HTTP rendering service.

pub mod commands;
pub mod config;
pub mod request;
pub mod service;

pub use commands::{exit_code, run, Cli};
