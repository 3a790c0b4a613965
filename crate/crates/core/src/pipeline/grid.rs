use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::DetectorBackend;
use super::stages::{finetune, train_student, PipelineConfig};
use crate::annotations::Dataset;
use crate::error::{Error, Result};
use crate::weight_policy::WeightPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// 1-based rank; failed points rank after all successful ones.
    pub rank: usize,
    pub policy: WeightPolicy,
    pub map_student: Option<f64>,
    pub map_finetuned: Option<f64>,
    pub error: Option<String>,
}

impl GridRow {
    fn metric(&self, finetuned: bool) -> Option<f64> {
        if finetuned {
            self.map_finetuned
        } else {
            self.map_student
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    /// Rows in rank order.
    pub rows: Vec<GridRow>,
    pub best: Option<WeightPolicy>,
    pub ranked_by_finetuned: bool,
}

fn fmt_map(v: Option<f64>) -> String {
    v.map(|m| format!("{m:.6}")).unwrap_or_else(|| "NA".into())
}

impl GridOutcome {
    /// Comma-separated table, one row per grid point.
    pub fn to_table(&self) -> String {
        let mut out = String::from("rank,variant,tau_l,tau_h,map_student,map_finetuned,status\n");
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("error: {}", e.replace([',', '\n'], " ")),
            };
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{}",
                r.rank,
                r.policy.variant,
                r.policy.tau_l,
                r.policy.tau_h,
                fmt_map(r.map_student),
                fmt_map(r.map_finetuned),
                status
            );
        }
        out
    }
}

/// Order by descending metric, then smaller `tau_h`, then smaller `tau_l`; rows
/// without a metric go last.
pub fn rank_rows(rows: &mut [GridRow], finetuned: bool) {
    rows.sort_by(|a, b| {
        let (ma, mb) = (a.metric(finetuned), b.metric(finetuned));
        match (ma, mb) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
        .then(a.policy.tau_h.total_cmp(&b.policy.tau_h))
        .then(a.policy.tau_l.total_cmp(&b.policy.tau_l))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

/// Train one student per policy from the same raw pseudo labels (optionally
/// fine-tuned) and rank by validation mAP. Failures are recorded and the search
/// continues. Point `i` writes its checkpoints under `out_dir/point_i/`.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    backend: &mut dyn DetectorBackend,
    labeled: &Dataset,
    pseudo: &Dataset,
    val: &Dataset,
    grid: &[WeightPolicy],
    cfg: &PipelineConfig,
    with_finetune: bool,
    out_dir: &Path,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::validation("policy grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (i, policy) in grid.iter().enumerate() {
        let dir = out_dir.join(format!("point_{i}"));
        let mut row = GridRow { rank: 0, policy: *policy, map_student: None, map_finetuned: None, error: None };
        let result = (|| -> Result<()> {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let student_path = dir.join("student.ckpt");
            let s = train_student(backend, labeled, pseudo, policy, val, cfg, 1, &student_path)?;
            row.map_student = Some(s.report.map);
            if with_finetune {
                let ft = finetune(backend, &student_path, labeled, val, cfg, 1, &dir.join("student_ft.ckpt"))?;
                row.map_finetuned = Some(ft.after.map);
            }
            Ok(())
        })();
        if let Err(e) = result {
            row.error = Some(e.to_string());
        }
        rows.push(row);
    }
    rank_rows(&mut rows, with_finetune);
    let best = rows.first().filter(|r| r.error.is_none()).map(|r| r.policy);
    Ok(GridOutcome { rows, best, ranked_by_finetuned: with_finetune })
}

/// Cartesian grid of one variant over `tau_l` × `tau_h`, skipping invalid pairs.
/// `SingleThreshold` ignores `tau_l`.
pub fn policy_grid(variant: crate::weight_policy::Variant, tau_l: &[f64], tau_h: &[f64]) -> Vec<WeightPolicy> {
    use crate::weight_policy::Variant;
    let mut out = Vec::new();
    for &h in tau_h {
        if variant == Variant::SingleThreshold {
            out.extend(WeightPolicy::single(h));
            continue;
        }
        for &l in tau_l {
            out.extend(WeightPolicy::new(variant, l, h));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tau_l: f64, tau_h: f64, m: Option<f64>) -> GridRow {
        GridRow {
            rank: 0,
            policy: WeightPolicy::doubt(tau_l, tau_h).unwrap(),
            map_student: m,
            map_finetuned: None,
            error: m.is_none().then(|| "boom".to_string()),
        }
    }

    #[test]
    fn ranking_and_ties() {
        let mut rows = vec![
            row(0.5, 0.9, Some(0.3)),
            row(0.4, 0.9, Some(0.3)),
            row(0.5, 0.8, Some(0.3)),
            row(0.1, 0.2, None),
            row(0.6, 0.99, Some(0.4)),
        ];
        rank_rows(&mut rows, false);
        let order: Vec<(f64, f64)> = rows.iter().map(|r| (r.policy.tau_l, r.policy.tau_h)).collect();
        assert_eq!(order, vec![(0.6, 0.99), (0.5, 0.8), (0.4, 0.9), (0.5, 0.9), (0.1, 0.2)]);
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn table_has_one_row_per_point() {
        let mut rows = vec![row(0.5, 0.9, Some(0.25)), row(0.1, 0.2, None)];
        rank_rows(&mut rows, false);
        let out = GridOutcome { best: Some(rows[0].policy), rows, ranked_by_finetuned: false };
        let t = out.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,doubt,0.500000,0.900000,0.250000,NA,ok");
        assert!(lines[2].starts_with("2,doubt,0.100000,0.200000,NA,NA,error: boom"));
    }

    #[test]
    fn grid_builder_skips_invalid_pairs() {
        use crate::weight_policy::Variant;
        let g = policy_grid(Variant::DoubtBand, &[0.5, 0.9], &[0.8, 0.95]);
        assert_eq!(g.len(), 3);
        let s = policy_grid(Variant::SingleThreshold, &[0.1, 0.2], &[0.8, 0.95]);
        assert_eq!(s.len(), 2);
    }
}
