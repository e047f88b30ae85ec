pub mod commands;
pub mod config;
pub mod error;

pub use config::{RunConfig, OUTPUT_DIR_ENV};
pub use error::CliError;
