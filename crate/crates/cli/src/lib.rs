//! Configuration-driven experiment runner for the morphsim simulator:
//! offline layer profiling, single-arm runs, rate sweeps and report
//! comparison.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Arm, ExperimentConfig};
pub use error::CliError;
