//! Experiment runner, metrics files, charts and demos behind the `dpfed`
//! command-line tool.

pub mod chart;
pub mod config;
pub mod demo;
pub mod error;
pub mod experiment;
pub mod metrics;

pub use error::{BenchError, Result};
