//! Experiment driver: configuration, single runs, metrics files, sweeps.

pub mod config;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use config::{DatasetSpec, ExperimentConfig};
pub use metrics::{read_metrics, MetricsWriter, RoundMetrics};
pub use run::{acc_drop, final_accuracy, malicious_roles, prepare_data, run_experiment, run_in_current_pool, RunResult};
pub use sweep::{ablation, sweep, SweepAxis, SweepCell, SweepSpec, SweepTable};
