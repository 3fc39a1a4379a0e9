//! Dataset generation with leave-one-anatomy-out splits, the annotate /
//! train / evaluate steps, and the noise-level and dataset-size sweeps.

pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;
pub mod sweeps;

pub use config::{DatasetSpec, EvalSpec, ExperimentConfig, NoiseSweepSpec, SizeSweepSpec, TrainingSpec};
pub use dataset::{generate_dataset, Dataset, DatasetSummary, LoadedSplit, SplitMeta, EXPERT, TEST, TRAIN, VAL};
pub use pipeline::{annotate, evaluate, train_condition, EvalRow, TrainingInfo};
pub use report::{write_results, ConditionResult, ExperimentResult};
pub use sweeps::{load_data, run_noise_sweep, run_size_sweep};
