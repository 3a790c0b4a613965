//! Teacher, pseudo labels, student, fine-tuning and iteration, plus the policy
//! grid search. Every stage talks to a [`DetectorBackend`].

mod backend;
mod grid;
mod iterate;
mod stages;

pub use backend::{
    detections_dataset, evaluate_model, load_images, DetectorBackend, PredictOutcome, ReferenceBackend, SkippedImage, TrainRequest,
    TrainResult,
};
pub use grid::{grid_search, policy_grid, rank_rows, GridOutcome, GridRow};
pub use iterate::{config_digest, iterate, Artifact, IterationInputs, PipelineState, RoundRecord, STATE_FILE};
pub use stages::{
    evaluate_checkpoint, finetune, generate_pseudo_labels, stage_seed, train_student, train_teacher,
    with_absolute_files, FinetuneResult, PipelineConfig, PseudoLabels, Stage, StageResult, StudentResult,
};
