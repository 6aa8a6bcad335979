//! Experiment plumbing around `icrlab`: datasets, run configuration, sweeps,
//! statistics and the `icrlab` command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod stats;
pub mod sweep;

pub use error::{CliError, Result};
