//! Experiment driver: configuration, the training loop with optional
//! pruning, metrics, checkpoints, run comparison and parameter sweeps.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DatasetKind, EngineKind, ExperimentConfig, Precision, DATA_ROOT_ENV};
pub use metrics::{compare_runs, ComparisonReport, CsvSink, MetricsRow, RunMetrics, SplitInfo};
pub use sweep::{sweep_configs, SweepPoint, SweepReport};
pub use train::{load_pool, load_split, run_training, Evaluation, Model, Phase, PhaseHook, PhaseLog, Trainer};
