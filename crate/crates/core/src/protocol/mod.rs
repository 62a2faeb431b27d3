mod checkpoint;
mod config;
mod model;
mod run;
mod train;
mod variant;

pub use checkpoint::{Checkpoint, ClassEntry, ClassKind, ClassifierState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::*;
pub use model::{decoded_box, empty_checkpoint, merge_checkpoints, MergedModel, ScoreHead};
pub use run::{
    detections_identical, evaluate_cell, evaluate_merged, representative, restrict, run_variant, seed_trunk, sweep,
    Metrics, SeedWorld,
};
pub use train::{
    build_training_set, finetune_new, init_new_heads, pretrain_base, refresh_two_stage, sgd_step, sgd_update,
    BoxSample, TrainLog, TrainingSet,
};
pub use variant::{ClassifierMode, PretrainFamily, Variant};
