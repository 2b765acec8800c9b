//! Run orchestration: configuration, datasets, training, evaluation and
//! checkpoints.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod train;
pub mod verify;

pub use config::{DataConfig, EvalConfig, Generator, RunConfig, TrainConfig, TrainMode};
pub use dataset::{build_dataset, eval_seed, generate_to_dir, generator_source, Dataset};
