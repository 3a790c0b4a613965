use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::annotations::{concat, Annotation, Dataset, DatasetKind, MixedDataset};
use crate::detector::{load_samples, predict, train, AnchorConfig, DetectorModel, EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{map_50_95, EvalReport, ScoredDetection};
use crate::synthetic::Raster;

pub struct TrainRequest<'a> {
    pub labeled: &'a Dataset,
    /// Policy-applied pseudo labels, if any.
    pub pseudo: Option<&'a Dataset>,
    pub val: &'a Dataset,
    /// Checkpoint to start from; `None` starts from scratch.
    pub init_model: Option<&'a Path>,
    pub output: &'a Path,
    pub config: &'a TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub model: PathBuf,
    /// Validation mAP reported by the trainer.
    pub val_map: f64,
    /// Per-epoch history; empty when the backend does not report one.
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedImage {
    pub image_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    /// `Detections` dataset over the images that could be processed.
    pub detections: Dataset,
    pub skipped: Vec<SkippedImage>,
}

/// Something that can train detectors and run them on images.
pub trait DetectorBackend {
    fn name(&self) -> &str;
    fn train(&mut self, req: &TrainRequest) -> Result<TrainResult>;
    fn predict(&mut self, model: &Path, images: &Dataset, score_floor: f64, nms_iou: f64) -> Result<PredictOutcome>;
}

/// Assemble a detections dataset from per-image results in image order.
pub fn detections_dataset(
    images: &Dataset,
    per_image: Vec<std::result::Result<Vec<crate::geometry::Detection>, String>>,
) -> PredictOutcome {
    let mut out = Dataset::new(DatasetKind::Detections, images.catalog.clone()).with_root(images.root.clone());
    let mut skipped = Vec::new();
    for (im, dets) in images.images.iter().zip(per_image) {
        match dets {
            Ok(dets) => {
                out.images.push(im.clone());
                for d in dets {
                    let id = out.annotations.len() as u64 + 1;
                    out.annotations.push(Annotation {
                        score: Some(d.score),
                        ..Annotation::ground_truth(id, im.id, d.class_id, d.bbox)
                    });
                }
            }
            Err(reason) => skipped.push(SkippedImage { image_id: im.id, reason }),
        }
    }
    PredictOutcome { detections: out, skipped }
}

/// Load every image of `d`, failing on the first unreadable one.
pub fn load_images(d: &Dataset) -> Result<Vec<Raster>> {
    d.images.par_iter().map(|im| Raster::read(d.image_path(im))).collect()
}

/// Predict on preloaded images and score against `gt`. Used for every
/// validation metric the reference detector produces.
pub fn evaluate_model(
    model: &DetectorModel,
    images: &[Raster],
    gt: &Dataset,
    score_floor: f64,
    nms_iou: f64,
) -> Result<EvalReport> {
    let per_image: Vec<Vec<ScoredDetection>> = images
        .par_iter()
        .zip(&gt.images)
        .map(|(r, im)| {
            predict(model, r, score_floor, nms_iou)
                .into_iter()
                .map(|det| ScoredDetection { image_id: im.id, det })
                .collect()
        })
        .collect();
    map_50_95(&per_image.concat(), gt)
}

/// The built-in linear detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBackend {
    pub anchors: AnchorConfig,
    /// Score floor and NMS threshold used for validation during training.
    pub score_floor: f64,
    pub nms_iou: f64,
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        ReferenceBackend { anchors: AnchorConfig::default(), score_floor: 0.05, nms_iou: 0.5 }
    }
}

impl DetectorBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "reference"
    }

    fn train(&mut self, req: &TrainRequest) -> Result<TrainResult> {
        if req.labeled.is_empty() {
            return Err(Error::Training("labeled set is empty".into()));
        }
        let mixed = match req.pseudo {
            Some(p) => concat(req.labeled, p)?,
            None => MixedDataset::labeled_only(req.labeled)?,
        };
        if req.val.catalog != req.labeled.catalog {
            return Err(Error::validation("validation catalog differs from the labeled catalog"));
        }
        let samples = load_samples(&mixed)?;
        let val_images = load_images(req.val)?;
        let init = match req.init_model {
            Some(p) => {
                let m = DetectorModel::load(p)?;
                if m.catalog != req.labeled.catalog {
                    return Err(Error::validation(format!(
                        "{}: checkpoint catalog differs from the dataset catalog",
                        p.display()
                    )));
                }
                m
            }
            None => DetectorModel::zeros(req.labeled.catalog.clone(), self.anchors.clone())?,
        };
        let (floor, nms_iou) = (self.score_floor, self.nms_iou);
        let mut validate = |m: &DetectorModel| Ok(evaluate_model(m, &val_images, req.val, floor, nms_iou)?.map);
        let out = train(init, &samples, req.config, &mut validate)?;
        out.model.save(req.output)?;
        Ok(TrainResult { model: req.output.to_path_buf(), val_map: out.best_val_map, history: out.history })
    }

    fn predict(&mut self, model: &Path, images: &Dataset, score_floor: f64, nms_iou: f64) -> Result<PredictOutcome> {
        let m = DetectorModel::load(model)?;
        if m.catalog != images.catalog {
            return Err(Error::validation(format!(
                "{}: checkpoint catalog differs from the image manifest catalog",
                model.display()
            )));
        }
        let per_image = images
            .images
            .par_iter()
            .map(|im| {
                let path = images.image_path(im);
                let r = Raster::read(&path).map_err(|e| e.to_string())?;
                if (r.width, r.height) != (im.width, im.height) {
                    return Err(format!("{}: raster size does not match the manifest", path.display()));
                }
                Ok(predict(&m, &r, score_floor, nms_iou))
            })
            .collect();
        Ok(detections_dataset(images, per_image))
    }
}
