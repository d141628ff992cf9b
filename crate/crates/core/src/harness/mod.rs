//! Experiment orchestration: configuration, per-trial streams, the
//! end-to-end pipeline, grid sweeps and CSV output.

pub mod config;
pub mod csi;
pub mod pipeline;
pub mod rng;
pub mod sweep;

pub use config::ExperimentConfig;
pub use csi::{csi_csv, run_csi, CsiRow};
pub use pipeline::{Cell, Experiment, Scheme, TrialRecord, TrialStatus};
pub use sweep::{run_grid, run_sweep, strip_wall_time, SweepResult};
