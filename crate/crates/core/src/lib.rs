//! Federated DP-SGD across simulated hospitals with a Rényi-DP accountant
//! and BFV-encrypted secure aggregation.

pub mod accountant;
pub mod dp;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod secure_agg;

pub use error::{Error, Result};
