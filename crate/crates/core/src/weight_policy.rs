//! Confidence-based pseudo-label weighting.
//!
//! Three parametrizations decide how a teacher prediction with confidence `s`
//! enters the student's loss:
//!
//! * [`Variant::SingleThreshold`]: keep with weight 1 when `s ≥ τ_h`, otherwise
//!   the region becomes background.
//! * [`Variant::DoubtBand`]: `α = 0` inside the doubt band `[τ_l, τ_h)` (the
//!   prediction is neither positive nor negative), `α = 1` otherwise; scores
//!   below `τ_l` are background.
//! * [`Variant::ProgressiveDoubt`]: inside the band the weight rises linearly,
//!   `α = (s − τ_l) / (τ_h − τ_l)`.
//!
//! Background proposals always carry weight 1 regardless of the variant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotations::{Dataset, DatasetKind, Status};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(rename = "single")]
    SingleThreshold,
    #[serde(rename = "doubt")]
    DoubtBand,
    #[serde(rename = "progressive")]
    ProgressiveDoubt,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SingleThreshold => "single",
            Variant::DoubtBand => "doubt",
            Variant::ProgressiveDoubt => "progressive",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Variant::SingleThreshold),
            "doubt" => Ok(Variant::DoubtBand),
            "progressive" => Ok(Variant::ProgressiveDoubt),
            other => Err(Error::Policy(format!(
                "unknown policy {other:?} (expected single, doubt or progressive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPolicy {
    pub variant: Variant,
    /// Unused by `SingleThreshold`.
    pub tau_l: f64,
    pub tau_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelStatus {
    Keep(f64),
    Ignore,
    Drop,
}

impl WeightPolicy {
    pub fn new(variant: Variant, tau_l: f64, tau_h: f64) -> Result<Self> {
        let p = WeightPolicy {
            variant,
            tau_l,
            tau_h,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn single(tau_h: f64) -> Result<Self> {
        Self::new(Variant::SingleThreshold, 0.0, tau_h)
    }

    pub fn doubt(tau_l: f64, tau_h: f64) -> Result<Self> {
        Self::new(Variant::DoubtBand, tau_l, tau_h)
    }

    pub fn progressive(tau_l: f64, tau_h: f64) -> Result<Self> {
        Self::new(Variant::ProgressiveDoubt, tau_l, tau_h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.variant {
            Variant::SingleThreshold => self.tau_h > 0.0 && self.tau_h <= 1.0,
            Variant::DoubtBand | Variant::ProgressiveDoubt => {
                self.tau_l >= 0.0 && self.tau_l < self.tau_h && self.tau_h <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Policy(format!(
                "invalid thresholds for {} policy: tau_l={} tau_h={} (need 0 <= tau_l < tau_h <= 1)",
                self.variant, self.tau_l, self.tau_h
            )))
        }
    }

    /// Loss weight α for a pseudo-label of confidence `s`. Defined only for the
    /// two-threshold variants.
    pub fn alpha(&self, s: f64) -> Result<f64> {
        let in_band = self.tau_l <= s && s < self.tau_h;
        match self.variant {
            Variant::SingleThreshold => Err(Error::Policy(
                "alpha undefined; use assign_status".to_string(),
            )),
            Variant::DoubtBand => Ok(if in_band { 0.0 } else { 1.0 }),
            Variant::ProgressiveDoubt => Ok(if in_band {
                (s - self.tau_l) / (self.tau_h - self.tau_l)
            } else {
                1.0
            }),
        }
    }

    pub fn assign_status(&self, s: f64) -> LabelStatus {
        if s >= self.tau_h {
            return LabelStatus::Keep(1.0);
        }
        match self.variant {
            Variant::SingleThreshold => LabelStatus::Drop,
            _ if s < self.tau_l => LabelStatus::Drop,
            Variant::DoubtBand => LabelStatus::Ignore,
            Variant::ProgressiveDoubt => {
                let a = (s - self.tau_l) / (self.tau_h - self.tau_l);
                // α = 0 at s = τ_l contributes nothing as a positive.
                if a > 0.0 {
                    LabelStatus::Keep(a)
                } else {
                    LabelStatus::Ignore
                }
            }
        }
    }
}

impl fmt::Display for WeightPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            Variant::SingleThreshold => write!(f, "single(tau_h={})", self.tau_h),
            v => write!(f, "{v}(tau_l={}, tau_h={})", self.tau_l, self.tau_h),
        }
    }
}

/// Annotate every pseudo-label with its policy status and weight.
pub fn apply_policy(pseudo: &Dataset, policy: &WeightPolicy) -> Result<Dataset> {
    policy.validate()?;
    if pseudo.kind != DatasetKind::Pseudo {
        return Err(Error::validation(format!(
            "apply_policy expects a pseudo dataset, got {}",
            pseudo.kind
        )));
    }
    let mut out = pseudo.clone();
    for a in &mut out.annotations {
        let s = a.score.ok_or_else(|| {
            Error::validation(format!("pseudo annotation {} has no score", a.id))
        })?;
        let (status, weight) = match policy.assign_status(s) {
            LabelStatus::Keep(w) => (Status::Keep, Some(w)),
            LabelStatus::Ignore => (Status::Ignore, None),
            LabelStatus::Drop => (Status::Drop, None),
        };
        a.status = Some(status);
        a.weight = weight;
    }
    Ok(out)
}

/// Inverse-frequency class weights, normalized to mean 1 over present classes.
/// Absent classes receive the largest present weight.
pub fn class_balance_weights(dist: &BTreeMap<u32, usize>) -> Result<BTreeMap<u32, f64>> {
    let present: Vec<f64> = dist
        .values()
        .filter(|&&c| c > 0)
        .map(|&c| 1.0 / c as f64)
        .collect();
    if present.is_empty() {
        return Err(Error::validation(
            "class balance weights need at least one class with a nonzero count",
        ));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let max_w = present.iter().cloned().fold(f64::MIN, f64::max) / mean;
    Ok(dist
        .iter()
        .map(|(&id, &c)| {
            let w = if c > 0 { (1.0 / c as f64) / mean } else { max_w };
            (id, w)
        })
        .collect())
}
