//! Experiment orchestration for translation-assisted segmentation:
//! configuration, training runs, checkpoints, Dice evaluation and image panels.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod loader;
pub mod panels;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, RunProgress, TrainingState};
pub use config::{ExperimentConfig, OUTPUT_ROOT_ENV};
pub use error::{CheckpointError, Error, Result};
pub use evaluate::{evaluate, residual_localization, DiceSummary, ResidualLocalization};
pub use loader::Dataset;
pub use panels::emit_panels;
pub use train::{run_experiment, run_seed, MetricsRecord, RunOptions, RunReport, SeedSummary};
