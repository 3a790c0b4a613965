//! Average precision per class and IoU threshold, and the AP₅₀:₉₅ aggregate.
//!
//! Matching is greedy in descending score. AP is the mean of the interpolated
//! precision sampled at the 101 recall points `0.00, 0.01, …, 1.00`. No cap
//! on detections per image is applied.
//!
//! Score ties are broken by image id and then by box coordinates, so results
//! do not depend on the order in which detections are supplied.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, Dataset, Status};
use crate::error::{Error, Result};
use crate::geometry::{Corners, Detection};

pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, …, 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub image_id: u64,
    pub det: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub det_index: usize,
    pub gt_index: Option<usize>,
    /// Matched to an ignored ground truth: neither TP nor FP.
    pub neutral: bool,
}

impl MatchResult {
    pub fn is_tp(&self) -> bool {
        self.gt_index.is_some() && !self.neutral
    }
}

fn det_order(a_img: u64, a: &Detection, b_img: u64, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a_img.cmp(&b_img))
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

fn gt_is_ignored(a: &Annotation) -> bool {
    a.status == Some(Status::Ignore)
}

/// Greedy matching of detections and ground truth of one image and one class.
/// Results are in processing order (descending score).
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_thr: f64) -> Vec<MatchResult> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| det_order(0, &dets[a], 0, &dets[b]).then(a.cmp(&b)));
    let gt_corners: Vec<Corners> = gts.iter().map(|g| g.bbox.corners()).collect();
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let dc = dets[d].bbox.corners();
            let mut best: Option<(usize, f64)> = None;
            for (g, gc) in gt_corners.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = dc.iou(gc);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            let gt_index = best.map(|(g, _)| g);
            MatchResult {
                det_index: d,
                gt_index,
                neutral: gt_index.is_some_and(|g| gt_is_ignored(&gts[g])),
            }
        })
        .collect()
}

/// 101-point interpolated AP from pooled, score-sorted TP flags.
fn ap_from_sorted(tp_flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if tp_flags.is_empty() { None } else { Some(0.0) };
    }
    if tp_flags.is_empty() {
        return Some(0.0);
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Per-image inputs for one class.
struct ClassImage<'a> {
    image_id: u64,
    dets: Vec<Detection>,
    gts: Vec<&'a Annotation>,
}

fn class_images<'a>(
    dets: &[ScoredDetection],
    gt: &'a Dataset,
    class_id: u32,
) -> Vec<ClassImage<'a>> {
    let index: HashMap<u64, usize> = gt
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id, i))
        .collect();
    let mut out: Vec<ClassImage> = gt
        .images
        .iter()
        .map(|im| ClassImage {
            image_id: im.id,
            dets: Vec::new(),
            gts: Vec::new(),
        })
        .collect();
    for a in &gt.annotations {
        if a.class_id == class_id && a.status != Some(Status::Drop) {
            if let Some(&i) = index.get(&a.image_id) {
                out[i].gts.push(a);
            }
        }
    }
    for d in dets {
        if d.det.class_id == class_id {
            if let Some(&i) = index.get(&d.image_id) {
                out[i].dets.push(d.det);
            }
        }
    }
    out
}

fn class_ap(images: &[ClassImage], iou_thr: f64) -> Option<f64> {
    let num_gt: usize = images
        .iter()
        .map(|im| im.gts.iter().filter(|g| !gt_is_ignored(g)).count())
        .sum();
    let mut pooled: Vec<(u64, Detection, bool)> = Vec::new();
    for im in images {
        let gts: Vec<Annotation> = im.gts.iter().map(|&g| g.clone()).collect();
        for m in match_detections(&im.dets, &gts, iou_thr) {
            if !m.neutral {
                pooled.push((im.image_id, im.dets[m.det_index], m.is_tp()));
            }
        }
    }
    pooled.sort_by(|a, b| det_order(a.0, &a.1, b.0, &b.1));
    let flags: Vec<bool> = pooled.iter().map(|p| p.2).collect();
    ap_from_sorted(&flags, num_gt)
}

/// AP of one class at one IoU threshold, pooled over all images of `gt`.
/// `None` when the class has neither ground truth nor detections.
pub fn average_precision(
    dets: &[ScoredDetection],
    gt: &Dataset,
    class_id: u32,
    iou_thr: f64,
) -> Option<f64> {
    class_ap(&class_images(dets, gt, class_id), iou_thr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub name: String,
    pub num_gt: usize,
    pub num_detections: usize,
    /// One entry per IoU threshold; `None` when the class is excluded.
    pub ap: Vec<Option<f64>>,
    pub mean_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean over classes of the per-class mean over IoU thresholds.
    pub map: f64,
}

impl EvalReport {
    pub fn class(&self, class_id: u32) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn ap_at(&self, class_id: u32, iou_thr: f64) -> Option<f64> {
        let t = self
            .iou_thresholds
            .iter()
            .position(|&x| (x - iou_thr).abs() < 1e-9)?;
        self.class(class_id)?.ap[t]
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("class_id,class,iou,ap\n");
        for c in &self.classes {
            for (t, ap) in self.iou_thresholds.iter().zip(&c.ap) {
                let ap = ap.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
                out.push_str(&format!("{},{},{t:.2},{ap}\n", c.class_id, c.name));
            }
        }
        out
    }

    /// Writes `<path>` (JSON) and a sibling `.csv` table.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
        let table = path.with_extension("csv");
        fs::write(&table, self.to_table()).map_err(|e| Error::io(&table, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            context: format!("line {} column {}: {e}", e.line(), e.column()),
        })
    }
}

pub fn map_50_95(dets: &[ScoredDetection], gt: &Dataset) -> Result<EvalReport> {
    evaluate(dets, gt, &coco_iou_thresholds())
}

pub fn evaluate(dets: &[ScoredDetection], gt: &Dataset, iou_thresholds: &[f64]) -> Result<EvalReport> {
    let image_ids: std::collections::HashSet<u64> = gt.images.iter().map(|im| im.id).collect();
    for d in dets {
        if !gt.catalog.contains(d.det.class_id) {
            return Err(Error::validation(format!(
                "detection class {} is not in the catalog",
                d.det.class_id
            )));
        }
        if !image_ids.contains(&d.image_id) {
            return Err(Error::validation(format!(
                "detection references image {} absent from the evaluation set",
                d.image_id
            )));
        }
    }
    let classes: Vec<ClassReport> = gt
        .catalog
        .categories()
        .par_iter()
        .map(|cat| {
            let images = class_images(dets, gt, cat.id);
            let num_gt = images
                .iter()
                .map(|im| im.gts.iter().filter(|g| !gt_is_ignored(g)).count())
                .sum();
            let num_detections = images.iter().map(|im| im.dets.len()).sum();
            let ap: Vec<Option<f64>> = iou_thresholds
                .iter()
                .map(|&t| class_ap(&images, t))
                .collect();
            let defined: Vec<f64> = ap.iter().flatten().copied().collect();
            let mean_ap = (!defined.is_empty())
                .then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            ClassReport {
                class_id: cat.id,
                name: cat.name.clone(),
                num_gt,
                num_detections,
                ap,
                mean_ap,
            }
        })
        .collect();
    let means: Vec<f64> = classes.iter().filter_map(|c| c.mean_ap).collect();
    let map = if means.is_empty() {
        0.0
    } else {
        means.iter().sum::<f64>() / means.len() as f64
    };
    Ok(EvalReport {
        iou_thresholds: iou_thresholds.to_vec(),
        classes,
        map,
    })
}

/// Flatten a detections dataset into scored detections.
pub fn detections_from_dataset(d: &Dataset) -> Result<Vec<ScoredDetection>> {
    d.annotations
        .iter()
        .map(|a| {
            let score = a.score.ok_or_else(|| {
                Error::validation(format!("detection {} carries no score", a.id))
            })?;
            Ok(ScoredDetection {
                image_id: a.image_id,
                det: Detection {
                    bbox: a.bbox,
                    class_id: a.class_id,
                    score,
                },
            })
        })
        .collect()
}
