use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::anchors::anchor_grid;
use super::features::{features_unchecked, Features, IntegralImage};
use super::loss::{accumulate, LossBreakdown};
use super::matching::{match_anchors, ProposalAssignment, Role};
use super::model::DetectorModel;
use crate::annotations::{Annotation, MixedDataset, Origin, Status};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::synthetic::{derive_seed, Raster};
use crate::weight_policy::class_balance_weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Non-improving epochs before the learning rate is divided by `lr_factor`.
    pub plateau_patience: u32,
    pub lr_factor: f64,
    /// Non-improving epochs before training stops.
    pub stop_patience: u32,
    pub max_epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_prob: f64,
    /// Weight positives by inverse class frequency (mean 1 over classes).
    pub class_balance: bool,
    /// Anchors sampled per image per step; 0 uses every assigned anchor.
    pub sampled_anchors: usize,
    /// Upper bound on the positive share of the sampled anchors.
    pub positive_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            plateau_patience: 5,
            lr_factor: 10.0,
            stop_patience: 10,
            max_epochs: 200,
            batch_size: 4,
            seed: 0,
            flip_prob: 0.5,
            class_balance: true,
            sampled_anchors: 128,
            positive_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::validation("lr0 must be positive"));
        }
        if self.plateau_patience < 1 || self.stop_patience < 1 {
            return Err(Error::validation("patiences must be at least 1"));
        }
        if !(self.lr_factor >= 1.0) {
            return Err(Error::validation("lr_factor must be at least 1"));
        }
        if self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::validation("max_epochs and batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::validation("momentum must be in [0,1) and weight_decay nonnegative"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::validation("positive_fraction must be in (0,1]"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::validation("flip_prob must be in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Stagnation,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScheduleStep {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: Option<StopReason>,
}

/// Plateau rules driven by a validation metric: a strict improvement resets both
/// counters; `plateau_patience` non-improving epochs divide the learning rate;
/// `stop_patience` non-improving epochs, or `max_epochs` epochs, stop training.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    pub epochs: u32,
    since_improvement: u32,
    since_lr_change: u32,
    plateau_patience: u32,
    stop_patience: u32,
    lr_factor: f64,
    max_epochs: u32,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: cfg.lr0,
            best: f64::NEG_INFINITY,
            epochs: 0,
            since_improvement: 0,
            since_lr_change: 0,
            plateau_patience: cfg.plateau_patience,
            stop_patience: cfg.stop_patience,
            lr_factor: cfg.lr_factor,
            max_epochs: cfg.max_epochs,
        }
    }

    /// Record the metric of the epoch just finished.
    pub fn observe(&mut self, metric: f64) -> ScheduleStep {
        self.epochs += 1;
        let mut step = ScheduleStep::default();
        if metric > self.best {
            self.best = metric;
            self.since_improvement = 0;
            self.since_lr_change = 0;
            step.improved = true;
        } else {
            self.since_improvement += 1;
            self.since_lr_change += 1;
            if self.since_improvement >= self.stop_patience {
                step.stop = Some(StopReason::Stagnation);
            } else if self.since_lr_change >= self.plateau_patience {
                self.lr /= self.lr_factor;
                self.since_lr_change = 0;
                step.lr_reduced = true;
            }
        }
        if step.stop.is_none() && self.epochs >= self.max_epochs {
            step.stop = Some(StopReason::MaxEpochs);
        }
        step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean per-image loss over the epoch.
    pub loss: f64,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub model: DetectorModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: u32,
    pub best_val_map: f64,
    pub stop_reason: StopReason,
}

/// One decoded training image with its policy-applied targets (Drop removed).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub origin: Origin,
    pub image: Raster,
    pub targets: Vec<Annotation>,
}

pub fn load_samples(mixed: &MixedDataset) -> Result<Vec<TrainSample>> {
    mixed
        .samples
        .par_iter()
        .map(|s| {
            let image = Raster::read(&s.path)?;
            if (image.width, image.height) != (s.image.width, s.image.height) {
                return Err(Error::validation(format!(
                    "{}: raster is {}x{} but manifest says {}x{}",
                    s.path.display(),
                    image.width,
                    image.height,
                    s.image.width,
                    s.image.height
                )));
            }
            let targets = s
                .annotations
                .iter()
                .filter(|a| a.effective_status() != Status::Drop)
                .cloned()
                .collect();
            Ok(TrainSample { origin: s.origin, image, targets })
        })
        .collect()
}

/// Class weights from the Keep annotations of the labeled samples (all samples
/// when there are none).
pub fn sample_class_weights(samples: &[TrainSample], model: &DetectorModel) -> Result<BTreeMap<u32, f64>> {
    let mut counts: BTreeMap<u32, usize> = model.catalog.ids().map(|id| (id, 0)).collect();
    let any_labeled = samples.iter().any(|s| s.origin == Origin::Labeled);
    for s in samples.iter().filter(|s| !any_labeled || s.origin == Origin::Labeled) {
        for a in &s.targets {
            if a.effective_status() == Status::Keep {
                *counts.entry(a.class_id).or_default() += 1;
            }
        }
    }
    if counts.values().all(|&c| c == 0) {
        return Ok(BTreeMap::new());
    }
    class_balance_weights(&counts)
}

fn flipped_targets(targets: &[Annotation], width: f64) -> Vec<Annotation> {
    targets
        .iter()
        .map(|a| Annotation { bbox: a.bbox.flip_horizontal(width), ..a.clone() })
        .collect()
}

struct AnchorCache(HashMap<(u32, u32), Vec<BoundingBox>>);

impl AnchorCache {
    fn build(samples: &[TrainSample], model: &DetectorModel) -> Self {
        let mut map = HashMap::new();
        for s in samples {
            map.entry((s.image.width, s.image.height))
                .or_insert_with(|| anchor_grid(s.image.width, s.image.height, &model.anchors));
        }
        AnchorCache(map)
    }
}

/// Keep at most `budget` contributing anchors, at most `positive_fraction` of them
/// positive; the rest become ignored for this step.
pub fn subsample_anchors(
    assigns: &mut [ProposalAssignment],
    budget: usize,
    positive_fraction: f64,
    rng: &mut ChaCha8Rng,
) {
    if budget == 0 {
        return;
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (j, a) in assigns.iter().enumerate() {
        match a.role {
            Role::Positive { .. } => pos.push(j),
            Role::Negative => neg.push(j),
            Role::Ignored => {}
        }
    }
    let max_pos = ((budget as f64 * positive_fraction).floor() as usize).max(1);
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(budget - n_pos);
    for (list, keep) in [(&mut pos, n_pos), (&mut neg, n_neg)] {
        if keep < list.len() {
            list.shuffle(rng);
            for &j in &list[keep..] {
                assigns[j].role = Role::Ignored;
            }
        }
    }
}

struct StepContext<'a> {
    anchors: &'a AnchorCache,
    class_weights: &'a BTreeMap<u32, f64>,
    cfg: &'a TrainConfig,
    epoch_seed: u64,
}

fn sample_loss(model: &DetectorModel, index: usize, sample: &TrainSample, flip: bool, ctx: &StepContext) -> (LossBreakdown, Vec<f64>) {
    let anchors = &ctx.anchors.0[&(sample.image.width, sample.image.height)];
    let flipped;
    let (image, targets) = if flip {
        flipped = (sample.image.flip_horizontal(), flipped_targets(&sample.targets, sample.image.width as f64));
        (&flipped.0, flipped.1.as_slice())
    } else {
        (&sample.image, sample.targets.as_slice())
    };
    let mut assigns = match_anchors(anchors, targets, ctx.class_weights, &model.anchors);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.epoch_seed, index as u64));
    subsample_anchors(&mut assigns, ctx.cfg.sampled_anchors, ctx.cfg.positive_fraction, &mut rng);
    assigns.retain(|a| !matches!(a.role, Role::Ignored));
    // Features only for anchors that contribute; `anchor` indexes the compact list.
    let ii = IntegralImage::new(image);
    let feats: Vec<Features> = assigns.iter().map(|a| features_unchecked(&ii, &anchors[a.anchor])).collect();
    for (k, a) in assigns.iter_mut().enumerate() {
        a.anchor = k;
    }
    let mut grad = vec![0.0; model.params.len()];
    let loss = accumulate(model, &feats, &assigns, sample.origin, &mut grad, 1.0);
    (loss, grad)
}

/// Train from `init` with SGD (momentum, weight decay), seeded shuffling and flips.
/// `validate` returns the validation mAP of a candidate model after every epoch;
/// the returned model carries the weights of the best such epoch.
pub fn train(
    init: DetectorModel,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    validate: &mut dyn FnMut(&DetectorModel) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let class_weights = if cfg.class_balance {
        sample_class_weights(samples, &init)?
    } else {
        BTreeMap::new()
    };
    let anchors = AnchorCache::build(samples, &init);
    let mut ctx = StepContext { anchors: &anchors, class_weights: &class_weights, cfg, epoch_seed: 0 };
    let mut model = init;
    let start_epochs = model.meta.epochs;
    model.meta.seed = cfg.seed;
    let mut velocity = vec![0.0; model.params.len()];
    let mut schedule = PlateauSchedule::new(cfg);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let n = samples.len() as f64;

    let stop_reason = loop {
        let epoch = schedule.epochs + 1;
        ctx.epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.epoch_seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| rng.random_bool(cfg.flip_prob)).collect();
        let lr = schedule.lr;
        let mut sums = [0.0f64; 5]; // total, labeled, unlabeled, cls, reg

        for (batch, batch_flips) in order.chunks(cfg.batch_size).zip(flips.chunks(cfg.batch_size)) {
            let results: Vec<(LossBreakdown, Vec<f64>)> = batch
                .par_iter()
                .zip(batch_flips)
                .map(|(&i, &flip)| sample_loss(&model, i, &samples[i], flip, &ctx))
                .collect();
            let mut grad = vec![0.0; model.params.len()];
            for (i, (loss, g)) in batch.iter().zip(&results) {
                if !loss.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch} on sample {i} (cls {}, reg {})",
                        loss.cls, loss.reg
                    )));
                }
                sums[0] += loss.total;
                sums[1] += loss.labeled;
                sums[2] += loss.unlabeled;
                sums[3] += loss.cls;
                sums[4] += loss.reg;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + (g * inv + cfg.weight_decay * *p);
                *p -= lr * *v;
            }
            if let Some(i) = model.params.iter().position(|p| !p.is_finite()) {
                return Err(Error::Training(format!("parameter {i} diverged at epoch {epoch}")));
            }
        }

        model.meta.epochs = start_epochs + epoch;
        let val_map = validate(&model)?;
        history.push(EpochRecord {
            epoch,
            lr,
            loss: sums[0] / n,
            loss_labeled: sums[1] / n,
            loss_unlabeled: sums[2] / n,
            loss_cls: sums[3] / n,
            loss_reg: sums[4] / n,
            val_map,
        });
        let step = schedule.observe(val_map);
        if step.improved {
            best = model.clone();
            best_epoch = epoch;
        }
        if let Some(reason) = step.stop {
            break reason;
        }
    };

    let mut model = best;
    model.meta.epochs = start_epochs + schedule.epochs;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_map: schedule.best,
        stop_reason,
    })
}
