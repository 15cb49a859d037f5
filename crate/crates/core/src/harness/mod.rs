//! Training, evaluation and the experiment runners built on top of them.

pub mod checkpoint;
pub mod experiments;
pub mod heatmap;
pub mod metrics;
pub mod train;
pub mod zoo;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use metrics::MetricSet;
pub use train::{evaluate, overfit, train, TrainConfig, TrainJob, TrainOutcome, TrainReport};
pub use zoo::ModelConfig;
