//! Configuration-driven experiment runner and sweeps.

mod config;
mod runner;
mod sweep;

pub use config::{parse_config, ObjectiveChoice, RunConfig};
pub use runner::{csv_path, run, run_seed, simulate, simulate_with, RunOutcome, RunStatus};
pub use sweep::{cell_config, sweep, MeanStd, SweepAxis, SweepCell, SweepReport, SweepSpec};
