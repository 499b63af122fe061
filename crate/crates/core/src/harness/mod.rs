//! Metrics, base-model training, experiment drivers and report emission.

pub mod experiments;
pub mod metrics;
pub mod report;
pub mod train;

pub use experiments::{run_experiment, ExperimentOptions, ExperimentReport, Workspace};
pub use metrics::{rtf, wer, werr, WerBreakdown};
pub use report::{emit, Format};
pub use train::{train_base, TrainConfig, TrainLog};
