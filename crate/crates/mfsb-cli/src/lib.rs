//! Scenario loading, flow persistence, plot data and the command pipelines
//! behind the `mfsb` binary.

pub mod commands;
pub mod error;
pub mod flowio;
pub mod plot;
pub mod scenario;

pub use commands::{run, Command, RunOptions};
pub use error::{CliError, Hypothesis, Result};
pub use flowio::{load_flow, save_flow, FlowFormat};
pub use scenario::{load_scenario, Scenario};
