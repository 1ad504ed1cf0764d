//! Command-line front end of `samsel`.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fit;
pub mod predict;
pub mod simulate;

pub use error::{CliError, Result};
