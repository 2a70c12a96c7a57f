//! Experiment configuration, single runs, sweeps, the results store and reports.

pub mod config;
pub mod report;
pub mod run;
pub mod store;
pub mod sweep;
pub mod verify;

pub use config::{AttackConfig, ExperimentConfig, QuantConfig};
pub use report::{
    curves, curves_csv, format_accuracy, format_auc, report, summarize, table, ReportStyle, Summary, Table,
};
pub use run::{prepare_data, run_experiment, ResultRecord, RunOptions, ENGINE_VERSION};
pub use store::{read_records, ResultsStore};
pub use sweep::{expand, run_cells, sweep, BitsTarget, Cell, FailedCell, SweepAxes, SweepOutcome};
