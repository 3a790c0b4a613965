use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip, BoundingBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub stride: f64,
    pub sizes: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            stride: 8.0,
            sizes: vec![8.0, 16.0, 32.0],
            ratios: vec![0.5, 1.0, 2.0],
            positive_iou: 0.5,
            negative_iou: 0.3,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_iou > self.negative_iou) {
            return Err(Error::validation(
                "anchor positive IoU threshold must exceed the negative threshold",
            ));
        }
        if !(self.stride > 0.0)
            || self.sizes.is_empty()
            || self.ratios.is_empty()
            || self.sizes.iter().chain(&self.ratios).any(|&v| !(v > 0.0))
        {
            return Err(Error::validation("anchor stride, sizes and ratios must be positive"));
        }
        Ok(())
    }

    pub fn per_location(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

/// Dense anchors: centers at `stride/2 + k·stride`, one box per (center, size, ratio),
/// clipped to the image. Ordered row-major over centers, then by size, then by ratio.
pub fn anchor_grid(width: u32, height: u32, cfg: &AnchorConfig) -> Vec<BoundingBox> {
    let (w, h) = (width as f64, height as f64);
    let nx = (w / cfg.stride).floor() as usize;
    let ny = (h / cfg.stride).floor() as usize;
    let mut out = Vec::with_capacity(nx * ny * cfg.per_location());
    for iy in 0..ny {
        let cy = cfg.stride / 2.0 + iy as f64 * cfg.stride;
        for ix in 0..nx {
            let cx = cfg.stride / 2.0 + ix as f64 * cfg.stride;
            for &s in &cfg.sizes {
                for &r in &cfg.ratios {
                    let aw = s / r.sqrt();
                    let ah = s * r.sqrt();
                    let b = BoundingBox::new(cx - aw / 2.0, cy - ah / 2.0, aw, ah);
                    // The center lies inside the image, so clipping cannot degenerate.
                    out.push(clip(&b, w, h).expect("anchor center inside image"));
                }
            }
        }
    }
    out
}
