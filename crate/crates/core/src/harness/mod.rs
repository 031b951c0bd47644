//! Experiment configuration, data loading, the training loop, metric
//! streams, and the batch commands behind the CLI.

mod commands;
mod config;
mod data;
mod metrics;
mod train;

pub use commands::*;
pub use config::{DatasetSource, ExperimentConfig, ModelSection, TrainConfig};
pub use data::{load_dataset, load_features, noise_bank, split_indices, Dataset, Features};
pub use metrics::{read_records, JsonLines, MetricsRecord, TimingRecord};
pub use train::{accuracy, batches, train_model, view_batches, EpochStats, TrainOutcome};
