use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::backend::DetectorBackend;
use super::stages::{
    evaluate_checkpoint, finetune, generate_pseudo_labels, round_dir, train_student, train_teacher,
    with_absolute_files, PipelineConfig,
};
use crate::annotations::{save_manifest, Dataset};
use crate::detector::sha256_hex;
use crate::error::{Error, Result};
use crate::weight_policy::WeightPolicy;

pub const STATE_FILE: &str = "state.json";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the work directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub teacher: Artifact,
    pub pseudo: Artifact,
    pub student: Artifact,
    pub student_ft: Artifact,
    pub reports: Vec<Artifact>,
    pub map_teacher: f64,
    pub map_student: f64,
    pub map_finetuned: f64,
    pub warnings: Vec<String>,
}

impl RoundRecord {
    fn artifacts(&self) -> impl Iterator<Item = &Artifact> {
        [&self.teacher, &self.pseudo, &self.student, &self.student_ft].into_iter().chain(&self.reports)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub version: u32,
    pub config_digest: String,
    pub policy: WeightPolicy,
    pub rounds: Vec<RoundRecord>,
}

impl PipelineState {
    /// Number of completed rounds.
    pub fn iteration(&self) -> u32 {
        self.rounds.len() as u32
    }

    /// Teacher for the next round: the last fine-tuned student, if any.
    pub fn current_teacher(&self, work_dir: &Path) -> Option<PathBuf> {
        self.rounds.last().map(|r| work_dir.join(&r.student_ft.path))
    }

    pub fn load(work_dir: &Path) -> Result<Option<PipelineState>> {
        let path = work_dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: PipelineState = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            context: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        if state.version != STATE_VERSION {
            return Err(Error::Pipeline(format!(
                "{}: unsupported state version {}",
                path.display(),
                state.version
            )));
        }
        Ok(Some(state))
    }

    fn save(&self, work_dir: &Path) -> Result<()> {
        let path = work_dir.join(STATE_FILE);
        let tmp = work_dir.join(format!("{STATE_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("state serializes");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Check every recorded artifact against its digest.
    pub fn verify(&self, work_dir: &Path) -> Result<()> {
        for r in &self.rounds {
            for a in r.artifacts() {
                let p = work_dir.join(&a.path);
                let problem = match fs::read(&p) {
                    Err(e) => Some(format!("cannot read {}: {e}", p.display())),
                    Ok(bytes) if sha256_hex(&bytes) != a.sha256 => {
                        Some(format!("{} does not match its recorded digest", p.display()))
                    }
                    Ok(_) => None,
                };
                if let Some(problem) = problem {
                    return Err(Error::Pipeline(format!(
                        "round {} is corrupted ({problem}); refusing to resume. Remove round_{} and \
                         later round directories and truncate {STATE_FILE}, or start a fresh work directory",
                        r.round, r.round
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn config_digest(cfg: &PipelineConfig, policy: &WeightPolicy) -> String {
    let text = serde_json::to_string(&(cfg, policy)).expect("config serializes");
    sha256_hex(text.as_bytes())
}

fn artifact(work_dir: &Path, path: &Path) -> Result<Artifact> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rel = path.strip_prefix(work_dir).unwrap_or(path).to_path_buf();
    Ok(Artifact { path: rel, sha256: sha256_hex(&bytes) })
}

pub struct IterationInputs<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: &'a Dataset,
    pub val: &'a Dataset,
    pub policy: WeightPolicy,
    pub config: &'a PipelineConfig,
    pub work_dir: &'a Path,
    /// Use this checkpoint as the first teacher instead of training one.
    pub initial_teacher: Option<&'a Path>,
}

/// Run rounds until `rounds` are complete, resuming from `state.json` when present.
/// Round `k` lives in `round_k/`; its teacher is a copy of round `k-1`'s fine-tuned
/// student.
pub fn iterate(
    backend: &mut dyn DetectorBackend,
    inputs: &IterationInputs,
    rounds: u32,
) -> Result<PipelineState> {
    if rounds < 1 {
        return Err(Error::validation("rounds must be at least 1"));
    }
    let cfg = inputs.config;
    cfg.validate()?;
    inputs.policy.validate()?;
    let work_dir = inputs.work_dir;
    fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let digest = config_digest(cfg, &inputs.policy);
    let mut state = match PipelineState::load(work_dir)? {
        Some(s) => {
            if s.config_digest != digest {
                return Err(Error::Pipeline(format!(
                    "{} was produced with a different configuration or policy; refusing to resume",
                    work_dir.display()
                )));
            }
            s.verify(work_dir)?;
            s
        }
        None => PipelineState {
            version: STATE_VERSION,
            config_digest: digest,
            policy: inputs.policy,
            rounds: Vec::new(),
        },
    };

    while state.iteration() < rounds {
        let k = state.iteration() + 1;
        let dir = round_dir(work_dir, k);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let teacher = dir.join("teacher.ckpt");
        let mut warnings = Vec::new();

        let teacher_report = match (state.current_teacher(work_dir), inputs.initial_teacher) {
            (Some(prev), _) => {
                fs::copy(&prev, &teacher).map_err(|e| Error::io(&prev, e))?;
                evaluate_checkpoint(backend, &teacher, inputs.val, cfg)?
            }
            (None, Some(init)) => {
                fs::copy(init, &teacher).map_err(|e| Error::io(init, e))?;
                evaluate_checkpoint(backend, &teacher, inputs.val, cfg)?
            }
            (None, None) => train_teacher(backend, inputs.labeled, inputs.val, cfg, &teacher)?.report,
        };

        let pseudo = generate_pseudo_labels(backend, &teacher, inputs.unlabeled, cfg.score_floor, cfg.pseudo_nms_iou)?;
        for s in &pseudo.skipped {
            warnings.push(format!("pseudo-labeling skipped image {}: {}", s.image_id, s.reason));
        }
        let student_path = dir.join("student.ckpt");
        let student = train_student(
            backend,
            inputs.labeled,
            &pseudo.dataset,
            &inputs.policy,
            inputs.val,
            cfg,
            k,
            &student_path,
        )?;
        warnings.extend(student.warnings.iter().cloned());
        let pseudo_path = dir.join("pseudo.manifest");
        save_manifest(&with_absolute_files(&student.applied)?, &pseudo_path)?;

        let ft_path = dir.join("student_ft.ckpt");
        let ft = finetune(backend, &student_path, inputs.labeled, inputs.val, cfg, k, &ft_path)?;

        let mut reports = Vec::new();
        for (name, report) in [
            ("eval_teacher.report", &teacher_report),
            ("eval_student.report", &student.report),
            ("eval_student_ft.report", &ft.after),
        ] {
            let p = dir.join(name);
            report.save(&p)?;
            reports.push(artifact(work_dir, &p)?);
        }
        state.rounds.push(RoundRecord {
            round: k,
            teacher: artifact(work_dir, &teacher)?,
            pseudo: artifact(work_dir, &pseudo_path)?,
            student: artifact(work_dir, &student_path)?,
            student_ft: artifact(work_dir, &ft_path)?,
            reports,
            map_teacher: teacher_report.map,
            map_student: student.report.map,
            map_finetuned: ft.after.map,
            warnings,
        });
        state.save(work_dir)?;
    }
    Ok(state)
}
