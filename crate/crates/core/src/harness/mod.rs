//! Training orchestration, persistence and the command implementations
//! behind the CLI.

mod checkpoint;
mod commands;
mod config;
mod grid;
mod losslog;
mod models;
mod train;

pub use checkpoint::{Checkpoint, RngState, CKPT_VERSION};
pub use commands::{evaluate_cmd, generate_cmd, train_classifier_cmd, ClassifierOutcome};
pub use config::TrainConfig;
pub use grid::{make_grid, GRID_COLUMNS};
pub use losslog::{LossLog, LossRow, HEADER as LOSS_HEADER};
pub use models::{
    classifier_checkpoint, classifier_from_checkpoint, load_stage1, stage1_checkpoint, stage1_from_checkpoint,
    stage2_checkpoint, stage2_from_checkpoint,
};
pub use train::{load_split, train_stage1, train_stage2, TrainOutcome};
