//! Command-line driver for the hybrid binary network experiments.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod report;

pub use config::ExperimentConfig;
