use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::backend::{DetectorBackend, SkippedImage, TrainRequest, TrainResult};
use crate::annotations::{Dataset, DatasetKind, Status};
use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::{detections_from_dataset, map_50_95, EvalReport};
use crate::synthetic::derive_seed;
use crate::weight_policy::{apply_policy, WeightPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Trainer settings; `seed` is replaced by a per-stage seed.
    pub train: TrainConfig,
    pub score_floor: f64,
    pub nms_iou: f64,
    /// NMS IoU threshold applied to teacher output when generating pseudo labels.
    pub pseudo_nms_iou: f64,
    /// Fine-tuning starts at `train.lr0 / finetune_lr_divisor`.
    pub finetune_lr_divisor: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            score_floor: 0.05,
            nms_iou: 0.5,
            pseudo_nms_iou: 0.5,
            finetune_lr_divisor: 10.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::validation("score floor must lie in [0, 1]"));
        }
        for t in [self.nms_iou, self.pseudo_nms_iou] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::validation("NMS IoU threshold must lie in (0, 1]"));
            }
        }
        if !(self.finetune_lr_divisor >= 1.0) {
            return Err(Error::validation("fine-tune LR divisor must be at least 1"));
        }
        Ok(())
    }

    /// Trainer settings for one stage of one round.
    pub fn stage_config(&self, round: u32, stage: Stage) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = stage_seed(self.seed, round, stage);
        if stage == Stage::Finetune {
            cfg.lr0 /= self.finetune_lr_divisor;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Teacher = 0,
    Student = 1,
    Finetune = 2,
}

/// Seed of a training stage: the round seed is `derive_seed(seed, round)`.
pub fn stage_seed(seed: u64, round: u32, stage: Stage) -> u64 {
    derive_seed(derive_seed(seed, round as u64), stage as u64)
}

/// Copy of `d` whose image paths are absolute, so it can be saved anywhere.
pub fn with_absolute_files(d: &Dataset) -> Result<Dataset> {
    let mut out = d.clone();
    for im in &mut out.images {
        let p = std::path::absolute(d.image_path(im)).map_err(|e| Error::io(d.image_path(im), e))?;
        im.file = p.to_string_lossy().into_owned();
    }
    Ok(out)
}

/// Predict on `gt`'s images with `model` and score the result. Every stage report
/// goes through this one path.
pub fn evaluate_checkpoint(
    backend: &mut dyn DetectorBackend,
    model: &Path,
    gt: &Dataset,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    if gt.kind != DatasetKind::Labeled {
        return Err(Error::validation("evaluation needs a labeled manifest"));
    }
    let out = backend.predict(model, &gt.strip_annotations(DatasetKind::Labeled), cfg.score_floor, cfg.nms_iou)?;
    if let Some(s) = out.skipped.first() {
        return Err(Error::Pipeline(format!(
            "cannot evaluate: image {} unreadable: {}",
            s.image_id, s.reason
        )));
    }
    map_50_95(&detections_from_dataset(&out.detections)?, gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub train: TrainResult,
    pub report: EvalReport,
}

pub fn train_teacher(
    backend: &mut dyn DetectorBackend,
    labeled: &Dataset,
    val: &Dataset,
    cfg: &PipelineConfig,
    output: &Path,
) -> Result<StageResult> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Training("cannot train a teacher on an empty labeled set".into()));
    }
    let config = cfg.stage_config(0, Stage::Teacher);
    let train = backend.train(&TrainRequest {
        labeled,
        pseudo: None,
        val,
        init_model: None,
        output,
        config: &config,
    })?;
    let report = evaluate_checkpoint(backend, &train.model, val, cfg)?;
    Ok(StageResult { train, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    /// `Pseudo` dataset with scores and no statuses.
    pub dataset: Dataset,
    pub skipped: Vec<SkippedImage>,
}

/// Run the teacher on every unlabeled image and keep all detections above the
/// floor as pseudo labels; the weight policy is applied later.
pub fn generate_pseudo_labels(
    backend: &mut dyn DetectorBackend,
    teacher: &Path,
    unlabeled: &Dataset,
    score_floor: f64,
    nms_iou: f64,
) -> Result<PseudoLabels> {
    if !unlabeled.annotations.is_empty() {
        return Err(Error::validation("unlabeled manifest must not contain annotations"));
    }
    let out = backend.predict(teacher, unlabeled, score_floor, nms_iou)?;
    let mut dataset = out.detections;
    dataset.kind = DatasetKind::Pseudo;
    dataset.validate()?;
    Ok(PseudoLabels { dataset, skipped: out.skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentResult {
    pub train: TrainResult,
    pub report: EvalReport,
    /// Pseudo labels with statuses and weights as used for training.
    pub applied: Dataset,
    pub warnings: Vec<String>,
}

/// Apply `policy` to the raw pseudo labels and train a fresh student on labeled
/// plus pseudo-labeled images.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    backend: &mut dyn DetectorBackend,
    labeled: &Dataset,
    pseudo: &Dataset,
    policy: &WeightPolicy,
    val: &Dataset,
    cfg: &PipelineConfig,
    round: u32,
    output: &Path,
) -> Result<StudentResult> {
    cfg.validate()?;
    let applied = apply_policy(pseudo, policy)?;
    let mut warnings = Vec::new();
    let usable = applied
        .annotations
        .iter()
        .filter(|a| matches!(a.status, Some(Status::Keep | Status::Ignore)))
        .count();
    if usable == 0 {
        warnings.push(format!(
            "policy {policy} keeps or ignores no pseudo label; pseudo images contribute background only"
        ));
    }
    let config = cfg.stage_config(round, Stage::Student);
    let train = backend.train(&TrainRequest {
        labeled,
        pseudo: Some(&applied),
        val,
        init_model: None,
        output,
        config: &config,
    })?;
    let report = evaluate_checkpoint(backend, &train.model, val, cfg)?;
    Ok(StudentResult { train, report, applied, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub train: TrainResult,
    pub before: EvalReport,
    pub after: EvalReport,
}

impl FinetuneResult {
    /// `before → after` in percent, as in a results table.
    pub fn arrow(&self) -> String {
        format!("{:.1} → {:.1}", 100.0 * self.before.map, 100.0 * self.after.map)
    }
}

/// Continue training a student on labeled data only, at a reduced learning rate.
pub fn finetune(
    backend: &mut dyn DetectorBackend,
    student: &Path,
    labeled: &Dataset,
    val: &Dataset,
    cfg: &PipelineConfig,
    round: u32,
    output: &Path,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    let before = evaluate_checkpoint(backend, student, val, cfg)?;
    let config = cfg.stage_config(round, Stage::Finetune);
    let train = backend.train(&TrainRequest {
        labeled,
        pseudo: None,
        val,
        init_model: Some(student),
        output,
        config: &config,
    })?;
    let after = evaluate_checkpoint(backend, &train.model, val, cfg)?;
    Ok(FinetuneResult { train, before, after })
}

pub(crate) fn round_dir(work_dir: &Path, round: u32) -> PathBuf {
    work_dir.join(format!("round_{round}"))
}
