use super::anchors::anchor_grid;
use super::features::box_features;
use super::matching::decode_deltas;
use super::model::DetectorModel;
use crate::geometry::{clip, nms, score_order, Detection};
use crate::synthetic::Raster;

/// Detections for one image: per anchor, confidence is the largest foreground
/// probability; anchors at or above `score_floor` are decoded, clipped and passed
/// through per-class NMS. Sorted by descending score.
pub fn predict(model: &DetectorModel, image: &Raster, score_floor: f64, nms_iou: f64) -> Vec<Detection> {
    let anchors = anchor_grid(image.width, image.height, &model.anchors);
    let feats = box_features(image, &anchors);
    let k1 = model.num_classes() + 1;
    let mut logits = vec![0.0; k1];
    let mut candidates = Vec::new();
    for (anchor, f) in anchors.iter().zip(&feats) {
        model.logits(f, &mut logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        // First class wins ties.
        let (mut best_c, mut best_l) = (1, logits[1]);
        for (c, &l) in logits.iter().enumerate().skip(2) {
            if l > best_l {
                best_c = c;
                best_l = l;
            }
        }
        let score = ((best_l - max).exp() / z).min(1.0);
        if score < score_floor {
            continue;
        }
        let Ok(bbox) = clip(&decode_deltas(anchor, &model.deltas(f)), image.width as f64, image.height as f64) else {
            continue;
        };
        candidates.push(Detection { bbox, class_id: best_c as u32, score });
    }
    let kept = nms(&candidates, nms_iou);
    let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
    score_order(&scores).into_iter().map(|i| kept[i]).collect()
}
