//! Everything around the model: configuration, image I/O, synthetic data,
//! checkpoints, training, evaluation and the gradient-check runner.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod pgm;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use config::TrainConfig;
pub use data::{
    foreground_fraction, generate_synthetic, generate_synthetic_dataset, load_dataset, save_dataset, SegSample,
};
pub use eval::{evaluate, infer_image, Evaluation, Inference};
pub use gradcheck::{grad_check, CheckOptions, GradCheckReport};
pub use train::{train, EpochLog, Sgd, Trainer};
