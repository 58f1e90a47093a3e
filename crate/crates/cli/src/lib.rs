//! Reproducible experiments on top of `dvmerge`: fine-tune reference
//! networks on synthetic tasks, run a merge protocol, emit reports.

pub mod commands;
pub mod config;

pub use commands::Protocol;
pub use config::{ConfigError, ExperimentConfig};
