//! Experiment runner: dataset generation, replicated fits, evaluation and
//! reports for the surrogates in `mmbnn`.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Experiment, Overrides, Profile};
pub use error::{CliError, Result};
