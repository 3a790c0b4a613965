//! Box arithmetic, IoU, clipping and per-class non-maximum suppression.
//!
//! Boxes are stored as top-left corner plus size (`x, y, w, h`) in continuous
//! pixel coordinates. Overlap computations go through [`Corners`].

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn from_corners(c: Corners) -> Self {
        BoundingBox {
            x: c.x0,
            y: c.y0,
            w: c.x1 - c.x0,
            h: c.y1 - c.y0,
        }
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x0: self.x,
            y0: self.y,
            x1: self.x + self.w,
            y1: self.y + self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Mirror about the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        BoundingBox {
            x: width - self.x - self.w,
            ..*self
        }
    }
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn intersection(&self, other: &Corners) -> f64 {
        let iw = self.x1.min(other.x1) - self.x0.max(other.x0);
        let ih = self.y1.min(other.y1) - self.y0.max(other.y0);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// IoU without validation. Callers guarantee positive areas.
    #[inline]
    pub fn iou(&self, other: &Corners) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Geometry(format!(
            "IoU requires positive-area boxes, got {a:?} and {b:?}"
        )));
    }
    Ok(a.corners().iou(&b.corners()))
}

/// Clip a box to `[0, width] × [0, height]`.
pub fn clip(b: &BoundingBox, width: f64, height: f64) -> Result<BoundingBox> {
    let c = b.corners();
    let clipped = Corners {
        x0: c.x0.clamp(0.0, width),
        y0: c.y0.clamp(0.0, height),
        x1: c.x1.clamp(0.0, width),
        y1: c.y1.clamp(0.0, height),
    };
    let out = BoundingBox::from_corners(clipped);
    if !out.is_valid() {
        return Err(Error::Geometry(format!(
            "degenerate after clip: {b:?} against {width}x{height}"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub score: f64,
}

/// Descending score, ascending index on ties.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Indices of the detections kept by greedy per-class NMS, in output order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let corners: Vec<Corners> = dets.iter().map(|d| d.bbox.corners()).collect();
    let mut kept_by_class: HashMap<u32, Vec<usize>> = HashMap::new();
    let mut out = Vec::new();
    for i in score_order(&scores) {
        let kept = kept_by_class.entry(dets[i].class_id).or_default();
        if kept
            .iter()
            .all(|&k| corners[k].iou(&corners[i]) < iou_threshold)
        {
            kept.push(i);
            out.push(i);
        }
    }
    out
}

/// Greedy per-class non-maximum suppression; output sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}
