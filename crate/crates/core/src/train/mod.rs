//! Optimization: Noam schedule, Adam updates with gradient clipping, and the
//! classifier training loop. The pair verifier's loop lives with its batch
//! assembly in [`crate::tesa`] and reuses the optimizer here.

mod classifier;
mod optimizer;
mod schedule;

pub use classifier::{
    build_chunk_set, holdout_accuracy, train_classifier, ChunkSet, EpochLog, TrainConfig,
    TrainReport,
};
pub use optimizer::{clip_gradients, AdamConfig, Optimizer, StepInfo};
pub use schedule::{noam_lr, NoamSchedule};
