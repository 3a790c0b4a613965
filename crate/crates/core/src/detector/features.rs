//! Hand-crafted box features computed from summed-area tables.
//!
//! Saliency is the per-pixel L1 distance (over channels, /255) from the rounded
//! image mean colour, which is dominated by the pitch.
//!
//! Layout (`FEATURE_DIM` = 84):
//! `[0..3)` channel means, `[3..15)` 4-bin histograms per channel (fractions),
//! `[15..18)` ln(w/16), ln(h/16), ln(h/w), `[18..21)` box mean minus the mean of a
//! 2-px surrounding ring per channel, `[21]` box saliency, `[22]` left half minus
//! right half saliency, `[23]` top half minus bottom half, `[24]` ring saliency,
//! `[25]` left minus right ring strip, `[26]` top minus bottom ring strip,
//! `[27..63)` a 3×3 grid of cells (row-major), each with saliency and the three
//! channel means, `[63..67)` saliency of context strips half the box size deep
//! beyond the left, right, top and bottom edges, `[67..75)` saliency of 8 equal
//! column strips spanning the box widened by half its width on each side (rows
//! of the box only), `[75..83)` the same for 8 row strips, `[83]` constant 1.
//!
//! The grid splits are mirror-symmetric and the signed features flip sign under a horizontal mirror,
//! which is what lets the regressor learn offsets.

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::synthetic::Raster;

pub const FEATURE_DIM: usize = 84;
const PROFILE: usize = 67;
const STRIPS: usize = 8;
const GRID: usize = 27;
pub type Features = [f64; FEATURE_DIM];

const PLANES: usize = 16;
const SALIENCY: usize = 15;
const RING: i64 = 2;

/// Summed-area table over 3 channel values, 12 histogram indicators and saliency.
pub struct IntegralImage {
    width: usize,
    height: usize,
    table: Vec<u32>,
}

impl IntegralImage {
    pub fn new(r: &Raster) -> IntegralImage {
        let (w, h) = (r.width as usize, r.height as usize);
        let stride = (w + 1) * PLANES;
        let mut table = vec![0u32; (h + 1) * stride];
        let mut reference = [0i64; 3];
        if w * h > 0 {
            let mut total = [0u64; 3];
            for px in r.data.chunks_exact(3) {
                for c in 0..3 {
                    total[c] += px[c] as u64;
                }
            }
            let n = (w * h) as u64;
            for c in 0..3 {
                reference[c] = ((2 * total[c] + n) / (2 * n)) as i64;
            }
        }
        let mut row = [0u32; PLANES];
        for (y, pixels) in r.data.chunks_exact(3 * w.max(1)).take(h).enumerate() {
            row.fill(0);
            let (above, cur) = table.split_at_mut((y + 1) * stride);
            let up = &above[y * stride + PLANES..(y + 1) * stride];
            let dst = &mut cur[PLANES..stride];
            for ((px, up), dst) in pixels.chunks_exact(3).zip(up.chunks_exact(PLANES)).zip(dst.chunks_exact_mut(PLANES)) {
                let mut sal = 0u32;
                for c in 0..3 {
                    row[c] += px[c] as u32;
                    row[3 + c * 4 + (px[c] >> 6) as usize] += 1;
                    sal += (px[c] as i64 - reference[c]).unsigned_abs() as u32;
                }
                row[SALIENCY] += sal;
                for k in 0..PLANES {
                    dst[k] = up[k] + row[k];
                }
            }
        }
        IntegralImage { width: w, height: h, table }
    }

    fn at(&self, x: usize, y: usize) -> &[u32] {
        let o = (y * (self.width + 1) + x) * PLANES;
        &self.table[o..o + PLANES]
    }

    /// Plane sums over pixel rectangle `[x0,x1) × [y0,y1)`.
    fn sums(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> [f64; PLANES] {
        let (a, b, c, d) = (self.at(x0, y0), self.at(x1, y0), self.at(x0, y1), self.at(x1, y1));
        let mut out = [0.0; PLANES];
        for k in 0..PLANES {
            out[k] = (d[k] + a[k]) as f64 - (b[k] + c[k]) as f64;
        }
        out
    }
}

impl IntegralImage {
    /// Sum of one plane over `[x0,x1) × [y0,y1)`.
    fn plane_sum(&self, k: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let at = |x: usize, y: usize| self.table[(y * (self.width + 1) + x) * PLANES + k];
        (at(x1, y1) + at(x0, y0)) as f64 - (at(x1, y0) + at(x0, y1)) as f64
    }
}

fn round_px(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Pixel span covered by `[lo, hi)`, at least one pixel wide and inside `[0, n)`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let n = n as i64;
    let mut a = round_px(lo).clamp(0, n);
    let mut b = round_px(hi).clamp(0, n);
    if b <= a {
        if a >= n {
            a = n - 1;
        }
        b = a + 1;
    }
    (a as usize, b as usize)
}

pub fn extract_features(ii: &IntegralImage, b: &BoundingBox) -> Result<Features> {
    if !b.is_valid() {
        return Err(Error::Geometry(format!("cannot extract features for degenerate box {b:?}")));
    }
    Ok(features_unchecked(ii, b))
}

pub(crate) fn features_unchecked(ii: &IntegralImage, b: &BoundingBox) -> Features {
    let c = b.corners();
    let (x0, x1) = pixel_span(c.x0, c.x1, ii.width);
    let (y0, y1) = pixel_span(c.y0, c.y1, ii.height);
    let inner = ii.sums(x0, y0, x1, y1);
    let n_in = ((x1 - x0) * (y1 - y0)) as f64;

    let ox0 = (x0 as i64 - RING).max(0) as usize;
    let oy0 = (y0 as i64 - RING).max(0) as usize;
    let ox1 = (x1 + RING as usize).min(ii.width);
    let oy1 = (y1 + RING as usize).min(ii.height);
    let outer = ii.sums(ox0, oy0, ox1, oy1);
    let n_ring = ((ox1 - ox0) * (oy1 - oy0)) as f64 - n_in;

    let mut f = [0.0; FEATURE_DIM];
    for ch in 0..3 {
        let mean = inner[ch] / n_in / 255.0;
        f[ch] = mean;
        for bin in 0..4 {
            f[3 + ch * 4 + bin] = inner[3 + ch * 4 + bin] / n_in;
        }
        f[18 + ch] = if n_ring > 0.0 {
            mean - (outer[ch] - inner[ch]) / n_ring / 255.0
        } else {
            0.0
        };
    }
    let sal = |x0: usize, y0: usize, x1: usize, y1: usize| -> f64 {
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        if n > 0.0 {
            ii.plane_sum(SALIENCY, x0, y0, x1, y1) / n / 255.0
        } else {
            0.0
        }
    };
    let (xm, ym) = ((x0 + x1) / 2, (y0 + y1) / 2);
    f[21] = inner[SALIENCY] / n_in / 255.0;
    if xm > x0 {
        f[22] = sal(x0, y0, xm, y1) - sal(xm, y0, x1, y1);
    }
    if ym > y0 {
        f[23] = sal(x0, y0, x1, ym) - sal(x0, ym, x1, y1);
    }
    if n_ring > 0.0 {
        f[24] = (outer[SALIENCY] - inner[SALIENCY]) / n_ring / 255.0;
    }
    f[25] = sal(ox0, y0, x0, y1) - sal(x1, y0, ox1, y1);
    f[26] = sal(x0, oy0, x1, y0) - sal(x0, y1, x1, oy1);
    f[15] = (b.w / 16.0).ln();
    f[16] = (b.h / 16.0).ln();
    f[17] = (b.h / b.w).ln();
    let (cx, cy) = ((x1 - x0) / 3, (y1 - y0) / 3);
    let xs = [x0, x0 + cx, x1 - cx, x1];
    let ys = [y0, y0 + cy, y1 - cy, y1];
    for r in 0..3 {
        for c in 0..3 {
            let (a, b, p, q) = (xs[c], ys[r], xs[c + 1], ys[r + 1]);
            let n = ((p - a) * (q - b)) as f64;
            if n == 0.0 {
                continue;
            }
            let o = GRID + (r * 3 + c) * 4;
            f[o] = ii.plane_sum(SALIENCY, a, b, p, q) / n / 255.0;
            for ch in 0..3 {
                f[o + 1 + ch] = ii.plane_sum(ch, a, b, p, q) / n / 255.0;
            }
        }
    }
    let (dx, dy) = (((x1 - x0) / 2).max(RING as usize), ((y1 - y0) / 2).max(RING as usize));
    f[63] = sal(x0.saturating_sub(dx), y0, x0, y1);
    f[64] = sal(x1, y0, (x1 + dx).min(ii.width), y1);
    f[65] = sal(x0, y0.saturating_sub(dy), x1, y0);
    f[66] = sal(x0, y1, x1, (y1 + dy).min(ii.height));
    // strip edges are symmetric about the box centre so mirroring reverses them
    let (bw, bh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let edge = |lo: usize, len: f64, k: usize| -> i64 {
        let v = (lo as f64 - len / 2.0) + 2.0 * len * k as f64 / STRIPS as f64;
        if 2 * k <= STRIPS { v.floor() as i64 } else { v.ceil() as i64 }
    };
    for k in 0..STRIPS {
        let (a, b) = (edge(x0, bw, k), edge(x0, bw, k + 1));
        let clip = |v: i64| v.clamp(0, ii.width as i64) as usize;
        f[PROFILE + k] = sal(clip(a), y0, clip(b).max(clip(a)), y1);
        let (a, b) = (edge(y0, bh, k), edge(y0, bh, k + 1));
        let clip = |v: i64| v.clamp(0, ii.height as i64) as usize;
        f[PROFILE + STRIPS + k] = sal(x0, clip(a), x1, clip(b).max(clip(a)));
    }
    f[FEATURE_DIM - 1] = 1.0;
    f
}

/// Features for every box, in order.
pub fn box_features(r: &Raster, boxes: &[BoundingBox]) -> Vec<Features> {
    let ii = IntegralImage::new(r);
    boxes.iter().map(|b| features_unchecked(&ii, b)).collect()
}
