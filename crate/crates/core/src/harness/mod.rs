//! Experiment orchestration.

pub mod attack;
pub mod config;
pub mod report;
pub mod sweep;
pub mod train;
pub mod verify;

pub use config::ExperimentConfig;
pub use train::{run_training, run_training_on, Checkpoint, TrainOutcome};
