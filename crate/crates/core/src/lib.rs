//! Voltage regulation on radial distribution feeders with PV smart inverters.
//!
//! The crate is layered bottom-up:
//!
//! - [`grid_model`]: network description, validation and the bus admittance matrix.
//! - [`power_flow`]: polar Newton-Raphson AC power flow, losses and branch flows.
//! - [`inverter`]: capability circle, VAR-priority curtailment and the Volt-Var droop.
//! - [`environment`]: state/action/reward contract used by the learning agent.
//! - [`neural`]: a small dense-network engine with backprop and Adam.
//! - [`ddpg`]: replay buffer, OU noise, actor/critic updates and the training driver.
//! - [`scenario`]: training-scenario sampling and hourly yearly profiles.
//! - [`harness`]: configuration, three-case evaluation and reporting.

pub mod ddpg;
pub mod environment;
pub mod error;
pub mod grid_model;
pub mod harness;
pub mod inverter;
pub mod neural;
pub mod power_flow;
pub mod scenario;

pub use error::{Error, Result};

/// Directory holding the bundled network, profile and config fixtures.
pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}
