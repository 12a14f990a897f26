//! File formats and subcommands of the `care` tool.

pub mod commands;
pub mod ctf;
pub mod error;
pub mod manifest;

pub use commands::{run, Command};
pub use error::{CliError, Result};
