//! Reference one-stage detector: dense anchors, hand-crafted box features and
//! linear classification and regression heads trained with weighted losses.

mod anchors;
mod features;
mod loss;
mod matching;
mod model;
mod predict;
mod train;

pub use anchors::{anchor_grid, AnchorConfig};
pub use features::{box_features, extract_features, Features, IntegralImage, FEATURE_DIM};
pub use loss::{compute_loss, smooth_l1, LossBreakdown, SMOOTH_L1_BETA};
pub use matching::{decode_deltas, encode_deltas, match_anchors, ProposalAssignment, Role};
pub use model::{sha256_hex, DetectorModel, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use predict::predict;
pub use train::{
    load_samples, sample_class_weights, train, EpochRecord, PlateauSchedule, ScheduleStep, StopReason,
    TrainConfig, TrainOutcome, TrainSample,
};
