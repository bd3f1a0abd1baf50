//! Config-driven sweeps over methods, inducing-set sizes and seeds, with
//! metrics against the exact posterior and CSV/JSON/SVG outputs.

pub mod bench;
pub mod config;
pub mod metrics;
pub mod report;
pub mod run;
pub mod theory;

pub use bench::{bench_scaling, log_log_slope, write_bench_report, BenchPoint, BenchReport};
pub use config::{AuxSize, BenchConfig, DatasetSource, ExperimentConfig, Method, DEFAULT_M_GRID};
pub use metrics::{compute_metrics, kl_to_exact, pointwise_rmse, Metrics};
pub use report::{emit_report, Metric};
pub use run::{
    load_dataset, read_results_csv, run_experiment, write_results_csv, ExperimentOutcome, ResultRow, RunRecord,
    RESULTS_HEADER, STATUS_OK,
};
pub use theory::{theory_check, CheckOutcome};
