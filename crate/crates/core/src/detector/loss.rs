//! Weighted cross-entropy plus smooth-L1 loss with exact gradients for the linear heads.
//!
//! Per image the weighted sums over contributing anchors (positives and negatives)
//! are divided by the number of contributing anchors; `LossBreakdown::contributing`
//! keeps the unnormalized sums recoverable.

use serde::{Deserialize, Serialize};

use super::features::{Features, FEATURE_DIM};
use super::matching::{ProposalAssignment, Role};
use super::model::DetectorModel;
use crate::annotations::Origin;

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    /// Loss from labeled-origin images.
    pub labeled: f64,
    /// Loss from pseudo-labeled images.
    pub unlabeled: f64,
    /// `labeled + unlabeled`.
    pub total: f64,
    pub contributing: usize,
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * x * x / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// Adds `scale ×` the gradient of this image's loss to `grad` and returns the loss.
pub(crate) fn accumulate(
    model: &DetectorModel,
    feats: &[Features],
    assignments: &[ProposalAssignment],
    origin: Origin,
    grad: &mut [f64],
    scale: f64,
) -> LossBreakdown {
    let k1 = model.num_classes() + 1;
    let contributing = assignments.iter().filter(|a| !matches!(a.role, Role::Ignored)).count();
    if contributing == 0 {
        return LossBreakdown::default();
    }
    let norm = 1.0 / contributing as f64;
    let cls_b = k1 * FEATURE_DIM;
    let reg_w = cls_b + k1;
    let reg_b = reg_w + 4 * FEATURE_DIM;

    let mut logits = vec![0.0; k1];
    let mut probs = vec![0.0; k1];
    let mut deltas = [0.0; 4];
    let (mut cls, mut reg) = (0.0, 0.0);
    for a in assignments {
        let (target, weight, target_deltas) = match a.role {
            Role::Ignored => continue,
            Role::Negative => (0usize, 1.0, None),
            Role::Positive { class_id, weight, deltas, .. } => (class_id as usize, weight, Some(deltas)),
        };
        let f = &feats[a.anchor];
        model.forward(f, &mut logits, &mut deltas);

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, l) in probs.iter_mut().zip(&logits) {
            *p = (l - max).exp();
            z += *p;
        }
        cls += weight * (z.ln() + max - logits[target]);
        let g = scale * weight * norm;
        for c in 0..k1 {
            let dz = g * (probs[c] / z - if c == target { 1.0 } else { 0.0 });
            if dz != 0.0 {
                axpy(&mut grad[c * FEATURE_DIM..(c + 1) * FEATURE_DIM], dz, f);
                grad[cls_b + c] += dz;
            }
        }

        if let Some(t) = target_deltas {
            for r in 0..4 {
                let diff = deltas[r] - t[r];
                reg += weight * smooth_l1(diff);
                let dr = g * smooth_l1_grad(diff);
                if dr != 0.0 {
                    axpy(&mut grad[reg_w + r * FEATURE_DIM..reg_w + (r + 1) * FEATURE_DIM], dr, f);
                    grad[reg_b + r] += dr;
                }
            }
        }
    }
    let (cls, reg) = (cls * norm, reg * norm);
    let total = cls + reg;
    let (labeled, unlabeled) = match origin {
        Origin::Labeled => (total, 0.0),
        Origin::Pseudo => (0.0, total),
    };
    LossBreakdown { cls, reg, labeled, unlabeled, total, contributing }
}

/// Loss of one image and its gradient with respect to `model.params`.
pub fn compute_loss(
    model: &DetectorModel,
    feats: &[Features],
    assignments: &[ProposalAssignment],
    origin: Origin,
) -> (LossBreakdown, Vec<f64>) {
    let mut grad = vec![0.0; model.params.len()];
    let loss = accumulate(model, feats, assignments, origin, &mut grad, 1.0);
    (loss, grad)
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &Features) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}
