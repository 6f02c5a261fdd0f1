//! Sweeps over `(V, d)`, capacity thresholds, slope fits and run files.

pub mod config;
pub mod fit;
pub mod protocol;
pub mod sweep;
pub mod table;

pub use config::{RunConfig, RunManifest, SCHEMA_VERSION};
pub use fit::{extract_thresholds, fit_loglog_slope, fit_thresholds, LogLogFit, ThresholdFit, ThresholdPoint};
pub use protocol::{BatchRule, Cell, LRule, MRule, NRule, SweepProtocol, TrainerSpec};
pub use sweep::{run_cell, run_sweep, task_seed, SweepOptions};
pub use table::{ResultRow, ResultTable, CSV_HEADER};
