//! Config-driven experiment orchestration and reporting.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{load_experiment, load_matrix, ExperimentConfig, MatrixConfig, Pipeline};
pub use pipeline::{Runner, Stage, StageError, CACHE_ENV};
pub use report::{MetricsReport, MetricsRow, RowStatus};
