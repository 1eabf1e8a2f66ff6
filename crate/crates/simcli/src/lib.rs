//! Experiment harness for secure clustered federated learning: synthetic
//! clustered tasks, Byzantine clients, the secure protocol run in-process,
//! metrics and scaling measurements.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod output;
pub mod report;
pub mod sim;

pub use error::{SimError, SimResult};
