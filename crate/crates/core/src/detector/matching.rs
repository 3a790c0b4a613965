use std::collections::BTreeMap;

use crate::annotations::{Annotation, Status};
use crate::geometry::{BoundingBox, Corners};

use super::anchors::AnchorConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Role {
    Positive {
        /// Index into the annotation slice given to [`match_anchors`].
        annotation: usize,
        class_id: u32,
        /// Pseudo-label weight times class weight.
        weight: f64,
        deltas: [f64; 4],
    },
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalAssignment {
    pub anchor: usize,
    pub role: Role,
}

impl ProposalAssignment {
    pub fn weight(&self) -> f64 {
        match self.role {
            Role::Positive { weight, .. } => weight,
            Role::Negative => 1.0,
            Role::Ignored => 0.0,
        }
    }
}

/// Regression target of `gt` relative to `anchor`: center offsets scaled by anchor
/// size and log size ratios.
pub fn encode_deltas(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.w,
        (gy - ay) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

pub fn decode_deltas(anchor: &BoundingBox, d: &[f64; 4]) -> BoundingBox {
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * anchor.w;
    let cy = ay + d[1] * anchor.h;
    let w = anchor.w * d[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.h * d[3].min(MAX_LOG_SCALE).exp();
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Assign each anchor a role against policy-applied annotations. Dropped annotations
/// are removed first; labeled ground truth without a status counts as Keep(1).
/// Classes missing from `class_weights` get weight 1.
pub fn match_anchors(
    anchors: &[BoundingBox],
    annotations: &[Annotation],
    class_weights: &BTreeMap<u32, f64>,
    cfg: &AnchorConfig,
) -> Vec<ProposalAssignment> {
    let targets: Vec<(usize, Corners, bool)> = annotations
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match a.effective_status() {
            Status::Drop => None,
            s => Some((i, a.bbox.corners(), s == Status::Keep)),
        })
        .collect();
    let positive = |anchor: usize, ann: usize| {
        let a = &annotations[ann];
        Role::Positive {
            annotation: ann,
            class_id: a.class_id,
            weight: a.effective_weight() * class_weights.get(&a.class_id).copied().unwrap_or(1.0),
            deltas: encode_deltas(&anchors[anchor], &a.bbox),
        }
    };

    let mut ious = vec![0.0; targets.len()];
    let mut out = Vec::with_capacity(anchors.len());
    // Per Keep target: best anchor and its IoU.
    let mut best_anchor: Vec<(f64, usize)> = vec![(0.0, usize::MAX); targets.len()];
    let mut best_keep_iou = vec![0.0; anchors.len()];
    for (j, anchor) in anchors.iter().enumerate() {
        let ac = anchor.corners();
        let mut best_keep: Option<(f64, usize)> = None;
        let mut max_ignore = 0.0f64;
        let mut max_all = 0.0f64;
        for (t, (ann, tc, keep)) in targets.iter().enumerate() {
            let v = ac.iou(tc);
            ious[t] = v;
            max_all = max_all.max(v);
            if *keep {
                if best_keep.is_none_or(|(b, _)| v > b) {
                    best_keep = Some((v, *ann));
                }
                if v > best_anchor[t].0 {
                    best_anchor[t] = (v, j);
                }
            } else {
                max_ignore = max_ignore.max(v);
            }
        }
        let role = match best_keep {
            Some((v, ann)) if v >= cfg.positive_iou => {
                best_keep_iou[j] = v;
                positive(j, ann)
            }
            _ if max_ignore >= cfg.positive_iou => Role::Ignored,
            _ if max_all < cfg.negative_iou => Role::Negative,
            _ => Role::Ignored,
        };
        out.push(ProposalAssignment { anchor: j, role });
    }

    for (t, (ann, _, keep)) in targets.iter().enumerate() {
        let (v, j) = best_anchor[t];
        if !keep || j == usize::MAX {
            continue;
        }
        let already = matches!(out[j].role, Role::Positive { .. }) && best_keep_iou[j] >= v;
        if !already {
            best_keep_iou[j] = v;
            out[j].role = positive(j, *ann);
        }
    }
    out
}
