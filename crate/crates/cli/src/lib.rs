//! Command-line driver for the emulated card.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod scenario;
pub mod session;

pub use cli::{run, Cli};
pub use error::CliError;
