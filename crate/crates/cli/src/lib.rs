//! Command-line driver: one subcommand per pipeline stage, configured by an
//! optional JSON file whose values individual flags override.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use semidet::annotations::{load_manifest, save_manifest, Dataset, DatasetKind};
use semidet::backend::{spawn_backend, HANDSHAKE_TIMEOUT};
use semidet::detector::TrainConfig;
use semidet::evaluation::EvalReport;
use semidet::pipeline::{
    evaluate_checkpoint, finetune, generate_pseudo_labels, grid_search, iterate, policy_grid, train_student,
    train_teacher, with_absolute_files, DetectorBackend, IterationInputs, PipelineConfig, ReferenceBackend,
};
use semidet::synthetic::{derive_seed, generate_dataset, WorldConfig};
use semidet::weight_policy::{Variant, WeightPolicy};
use semidet::{Error, Result};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DetectorSource {
    #[default]
    Reference,
    Backend,
}

/// Everything a run needs. Missing keys in a config file take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub work_dir: PathBuf,
    /// Manifests; unset ones default to the files `gen` writes, `work_dir/data/<set>/<set>.manifest`.
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub policy: WeightPolicy,
    pub score_floor: f64,
    pub nms_iou: f64,
    /// NMS threshold for pseudo-label generation.
    pub pseudo_nms_iou: f64,
    pub finetune_lr_divisor: f64,
    pub seed: u64,
    pub rounds: u32,
    pub detector: DetectorSource,
    pub backend_cmd: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            work_dir: PathBuf::from("work"),
            labeled: None,
            unlabeled: None,
            val: None,
            world: WorldConfig::default(),
            train: p.train,
            policy: WeightPolicy::progressive(0.5, 1.0).expect("valid default policy"),
            score_floor: p.score_floor,
            nms_iou: p.nms_iou,
            pseudo_nms_iou: p.pseudo_nms_iou,
            finetune_lr_divisor: p.finetune_lr_divisor,
            seed: p.seed,
            rounds: 1,
            detector: DetectorSource::Reference,
            backend_cmd: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            context: format!("line {} column {}: {e}", e.line(), e.column()),
        })
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            train: self.train.clone(),
            score_floor: self.score_floor,
            nms_iou: self.nms_iou,
            pseudo_nms_iou: self.pseudo_nms_iou,
            finetune_lr_divisor: self.finetune_lr_divisor,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.policy.validate()?;
        self.world.validate()?;
        if self.rounds < 1 {
            return Err(Error::validation("rounds must be at least 1"));
        }
        match (self.detector, &self.backend_cmd) {
            (DetectorSource::Backend, None) => Err(Error::validation("detector \"backend\" needs a backend command")),
            (DetectorSource::Reference, Some(_)) => Err(Error::validation(
                "conflicting detector sources: the reference detector is selected but a backend command is set",
            )),
            _ => Ok(()),
        }
    }

    fn data(&self, name: &str) -> PathBuf {
        self.work_dir.join("data").join(name).join(format!("{name}.manifest"))
    }

    pub fn labeled_path(&self) -> PathBuf {
        self.labeled.clone().unwrap_or_else(|| self.data("labeled"))
    }

    pub fn unlabeled_path(&self) -> PathBuf {
        self.unlabeled.clone().unwrap_or_else(|| self.data("unlabeled"))
    }

    pub fn val_path(&self) -> PathBuf {
        self.val.clone().unwrap_or_else(|| self.data("val"))
    }

    /// Copy with every path absolute and the default manifest paths spelled out.
    pub fn resolved(&self) -> Result<RunConfig> {
        let abs = |p: PathBuf| std::path::absolute(&p).map_err(|e| Error::io(&p, e));
        let mut out = self.clone();
        out.work_dir = abs(self.work_dir.clone())?;
        out.labeled = Some(abs(self.labeled_path())?);
        out.unlabeled = Some(abs(self.unlabeled_path())?);
        out.val = Some(abs(self.val_path())?);
        Ok(out)
    }
}

#[derive(Debug, Parser)]
#[command(name = "semidet", version, about = "Teacher-student semi-supervised detection with confidence-weighted pseudo labels")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["single", "doubt", "progressive"])]
    pub policy: Option<String>,
    #[arg(long, global = true)]
    pub tau_l: Option<f64>,
    #[arg(long, global = true)]
    pub tau_h: Option<f64>,
    #[arg(long, global = true)]
    pub nms_iou: Option<f64>,
    #[arg(long, global = true)]
    pub pseudo_nms_iou: Option<f64>,
    #[arg(long, global = true)]
    pub score_floor: Option<f64>,
    #[arg(long, global = true)]
    pub rounds: Option<u32>,
    /// External detector process; selects the backend detector.
    #[arg(long, global = true)]
    pub backend_cmd: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub detector: Option<DetectorSource>,
    #[arg(long, global = true)]
    pub labeled: Option<PathBuf>,
    #[arg(long, global = true)]
    pub unlabeled: Option<PathBuf>,
    #[arg(long, global = true)]
    pub val: Option<PathBuf>,
    #[arg(long, global = true)]
    pub max_epochs: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled, unlabeled and validation sets from the synthetic world.
    Gen {
        /// Labeled images; the other sets default to the same count.
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long)]
        unlabeled_images: Option<usize>,
        #[arg(long)]
        val_images: Option<usize>,
    },
    /// Train the teacher on labeled data only.
    Teacher,
    /// Run a model over the unlabeled images and store every detection above the floor.
    Pseudo {
        /// Defaults to the teacher checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Apply the weight policy and train a student on labeled plus pseudo data.
    Student {
        /// Raw pseudo labels; defaults to the output of `pseudo`.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Continue training a checkpoint on labeled data at a reduced learning rate.
    Finetune {
        /// Defaults to the student checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score a checkpoint against a labeled manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Ground truth; defaults to the validation manifest.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Run complete teacher-student rounds, resuming completed ones.
    Iterate,
    /// Train one student per policy in a grid and rank them.
    Grid {
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Comma-separated lower thresholds (ignored by `single`).
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        tau_l_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.9")]
        tau_h_grid: Vec<f64>,
        /// Rank by the fine-tuned student instead of the raw student.
        #[arg(long)]
        finetune: bool,
    },
}

/// Layer the flags over the config file (or the defaults).
pub fn build_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &g.work_dir {
        cfg.work_dir = v.clone();
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = g.nms_iou {
        cfg.nms_iou = v;
    }
    if let Some(v) = g.pseudo_nms_iou {
        cfg.pseudo_nms_iou = v;
    }
    if let Some(v) = g.score_floor {
        cfg.score_floor = v;
    }
    if let Some(v) = g.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = g.max_epochs {
        cfg.train.max_epochs = v;
    }
    for (slot, flag) in [(&mut cfg.labeled, &g.labeled), (&mut cfg.unlabeled, &g.unlabeled), (&mut cfg.val, &g.val)] {
        if let Some(v) = flag {
            *slot = Some(v.clone());
        }
    }
    if g.policy.is_some() || g.tau_l.is_some() || g.tau_h.is_some() {
        let variant = match &g.policy {
            Some(s) => s.parse::<Variant>()?,
            None => cfg.policy.variant,
        };
        cfg.policy = WeightPolicy::new(variant, g.tau_l.unwrap_or(cfg.policy.tau_l), g.tau_h.unwrap_or(cfg.policy.tau_h))?;
    }
    match (&g.backend_cmd, g.detector) {
        (Some(_), Some(DetectorSource::Reference)) => {
            return Err(Error::validation("conflicting detector sources: --detector reference with --backend-cmd"))
        }
        (Some(cmd), _) => {
            cfg.backend_cmd = Some(cmd.clone());
            cfg.detector = DetectorSource::Backend;
        }
        (None, Some(d)) => cfg.detector = d,
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_backend(cfg: &RunConfig) -> Result<Box<dyn DetectorBackend>> {
    match cfg.detector {
        DetectorSource::Reference => Ok(Box::new(ReferenceBackend {
            score_floor: cfg.score_floor,
            nms_iou: cfg.nms_iou,
            ..Default::default()
        })),
        DetectorSource::Backend => {
            let cmd = cfg.backend_cmd.as_deref().expect("validated backend command");
            Ok(Box::new(spawn_backend(cmd, HANDSHAKE_TIMEOUT)?))
        }
    }
}

/// Missing inputs are configuration mistakes, not run failures.
fn input(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::validation(format!("{} does not exist", path.display())))
    }
}

fn manifest(path: &Path) -> Result<Dataset> {
    load_manifest(input(path)?)
}

fn labeled_manifest(path: &Path) -> Result<Dataset> {
    let d = manifest(path)?;
    if d.kind != DatasetKind::Labeled {
        return Err(Error::validation(format!("{}: expected a labeled manifest, found {}", path.display(), d.kind)));
    }
    Ok(d)
}

fn save_report(report: &EvalReport, path: &Path, title: &str) -> Result<()> {
    report.save(path)?;
    println!("{title}: mAP {:.4} -> {}", report.map, path.display());
    print!("{}", report.to_table());
    Ok(())
}

fn write_effective_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.work_dir).map_err(|e| Error::io(&cfg.work_dir, e))?;
    let path = cfg.work_dir.join(EFFECTIVE_CONFIG);
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Execute one subcommand with an already validated configuration.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<()> {
    let cfg = cfg.resolved()?;
    write_effective_config(&cfg)?;
    let pc = cfg.pipeline();
    let work = &cfg.work_dir;
    if let Command::Gen { images, unlabeled_images, val_images } = command {
        let data = work.join("data");
        let sets = [
            ("labeled", *images, 1),
            ("unlabeled", unlabeled_images.unwrap_or(*images), 2),
            ("val", val_images.unwrap_or(*images), 3),
        ];
        for (name, n, stream) in sets {
            let mut d = generate_dataset(&cfg.world, n, derive_seed(cfg.seed, stream), &data.join(name))?;
            if name == "unlabeled" {
                d = d.strip_annotations(DatasetKind::Labeled);
            }
            let path = data.join(name).join(format!("{name}.manifest"));
            save_manifest(&d, &path)?;
            println!("{name}: {} images, {} annotations -> {}", d.images.len(), d.annotations.len(), path.display());
        }
        return Ok(());
    }

    let mut backend = open_backend(&cfg)?;
    let be = backend.as_mut();
    let val = || labeled_manifest(&cfg.val_path());
    match command {
        Command::Gen { .. } => unreachable!("handled above"),
        Command::Teacher => {
            let out = work.join("teacher.ckpt");
            let r = train_teacher(be, &labeled_manifest(&cfg.labeled_path())?, &val()?, &pc, &out)?;
            println!("teacher: {} epochs -> {}", r.train.history.len(), out.display());
            save_report(&r.report, &work.join("eval_teacher.report"), "teacher")?;
        }
        Command::Pseudo { model } => {
            let model = model.clone().unwrap_or_else(|| work.join("teacher.ckpt"));
            let unlabeled = manifest(&cfg.unlabeled_path())?;
            let p = generate_pseudo_labels(be, input(&model)?, &unlabeled, cfg.score_floor, cfg.pseudo_nms_iou)?;
            let out = work.join("pseudo.manifest");
            save_manifest(&with_absolute_files(&p.dataset)?, &out)?;
            println!("pseudo: {} labels on {} images -> {}", p.dataset.annotations.len(), p.dataset.images.len(), out.display());
            if !p.skipped.is_empty() {
                for s in &p.skipped {
                    eprintln!("skipped image {}: {}", s.image_id, s.reason);
                }
                return Err(Error::Pipeline(format!("{} unlabeled images could not be processed", p.skipped.len())));
            }
        }
        Command::Student { pseudo } => {
            let pseudo = manifest(&pseudo.clone().unwrap_or_else(|| work.join("pseudo.manifest")))?;
            let out = work.join("student.ckpt");
            let s = train_student(be, &labeled_manifest(&cfg.labeled_path())?, &pseudo, &cfg.policy, &val()?, &pc, 1, &out)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            save_manifest(&with_absolute_files(&s.applied)?, work.join("pseudo_applied.manifest"))?;
            println!("student ({}): {} epochs -> {}", cfg.policy, s.train.history.len(), out.display());
            save_report(&s.report, &work.join("eval_student.report"), "student")?;
        }
        Command::Finetune { model } => {
            let model = model.clone().unwrap_or_else(|| work.join("student.ckpt"));
            let out = work.join("student_ft.ckpt");
            let ft = finetune(be, input(&model)?, &labeled_manifest(&cfg.labeled_path())?, &val()?, &pc, 1, &out)?;
            println!("finetune: {} -> {}", ft.arrow(), out.display());
            ft.before.save(work.join("eval_student_ft_before.report"))?;
            save_report(&ft.after, &work.join("eval_student_ft.report"), "fine-tuned")?;
        }
        Command::Eval { model, gt } => {
            let gt = labeled_manifest(&gt.clone().unwrap_or_else(|| cfg.val_path()))?;
            let report = evaluate_checkpoint(be, input(model)?, &gt, &pc)?;
            save_report(&report, &work.join("eval.report"), "eval")?;
        }
        Command::Iterate => {
            let labeled = labeled_manifest(&cfg.labeled_path())?;
            let unlabeled = manifest(&cfg.unlabeled_path())?;
            let val = val()?;
            let inputs = IterationInputs {
                labeled: &labeled,
                unlabeled: &unlabeled,
                val: &val,
                policy: cfg.policy,
                config: &pc,
                work_dir: work,
                initial_teacher: None,
            };
            let state = iterate(be, &inputs, cfg.rounds)?;
            println!("round,map_teacher,map_student,map_finetuned");
            for r in &state.rounds {
                println!("{},{:.6},{:.6},{:.6}", r.round, r.map_teacher, r.map_student, r.map_finetuned);
                for w in &r.warnings {
                    eprintln!("round {} warning: {w}", r.round);
                }
            }
        }
        Command::Grid { pseudo, tau_l_grid, tau_h_grid, finetune } => {
            let pseudo = manifest(&pseudo.clone().unwrap_or_else(|| work.join("pseudo.manifest")))?;
            let grid = policy_grid(cfg.policy.variant, tau_l_grid, tau_h_grid);
            if grid.is_empty() {
                return Err(Error::validation("no valid (tau_l, tau_h) pair in the grid"));
            }
            let labeled = labeled_manifest(&cfg.labeled_path())?;
            let g = grid_search(be, &labeled, &pseudo, &val()?, &grid, &pc, *finetune, &work.join("grid"))?;
            let table = g.to_table();
            let out = work.join("grid.csv");
            fs::write(&out, &table).map_err(|e| Error::io(&out, e))?;
            print!("{table}");
            match g.best {
                Some(p) => println!("best: {p}"),
                None => return Err(Error::Pipeline("every grid point failed".into())),
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parse `args` (program name first), run, and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let result = build_config(&cli.global).and_then(|cfg| execute(&cli.command, &cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(args: &[&str]) -> std::result::Result<GlobalArgs, clap::Error> {
        let mut argv = vec!["semidet"];
        argv.extend_from_slice(args);
        argv.push("teacher");
        Cli::try_parse_from(argv).map(|c| c.global)
    }

    #[test]
    fn paper_parametrization_parses() {
        let g = global(&["--policy", "progressive", "--tau-l", "0.9", "--tau-h", "1.0"]).unwrap();
        let cfg = build_config(&g).unwrap();
        assert_eq!(cfg.policy, WeightPolicy::progressive(0.9, 1.0).unwrap());
    }

    #[test]
    fn inverted_band_is_a_usage_error() {
        let g = global(&["--policy", "doubt", "--tau-l", "0.99", "--tau-h", "0.9"]).unwrap();
        let e = build_config(&g).unwrap_err();
        assert!(e.is_validation(), "{e}");
    }

    #[test]
    fn unknown_flag_and_policy_are_rejected() {
        assert!(global(&["--bogus"]).is_err());
        assert!(global(&["--policy", "triple"]).is_err());
    }

    #[test]
    fn flag_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seed": 5, "nms_iou": 0.4, "train": {"max_epochs": 7}}"#).unwrap();
        let p = path.to_str().unwrap();
        let cfg = build_config(&global(&["--config", p, "--nms-iou", "0.6"]).unwrap()).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.nms_iou, 0.6);
        assert_eq!(cfg.train.max_epochs, 7);
        assert_eq!(cfg.train.lr0, 0.02);
    }

    #[test]
    fn partial_policy_flags_keep_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"policy": {"variant": "doubt", "tau_l": 0.6, "tau_h": 0.9}}"#).unwrap();
        let p = path.to_str().unwrap();
        let cfg = build_config(&global(&["--config", p, "--tau-h", "0.95"]).unwrap()).unwrap();
        assert_eq!(cfg.policy, WeightPolicy::doubt(0.6, 0.95).unwrap());
    }

    #[test]
    fn conflicting_detector_sources_are_rejected() {
        let g = global(&["--detector", "reference", "--backend-cmd", "x"]).unwrap();
        assert!(build_config(&g).unwrap_err().is_validation());
        let g = global(&["--detector", "backend"]).unwrap();
        assert!(build_config(&g).unwrap_err().is_validation());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"detector": "reference", "backend_cmd": "x"}"#).unwrap();
        let g = global(&["--config", path.to_str().unwrap()]).unwrap();
        assert!(build_config(&g).unwrap_err().is_validation());
        let g = global(&["--backend-cmd", "python3 b.py"]).unwrap();
        assert_eq!(build_config(&g).unwrap().detector, DetectorSource::Backend);
    }

    #[test]
    fn unknown_config_key_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"sead": 1}"#).unwrap();
        let e = build_config(&global(&["--config", path.to_str().unwrap()]).unwrap()).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig { work_dir: "w".into(), ..Default::default() }.resolved().unwrap();
        assert!(cfg.work_dir.is_absolute());
        assert_eq!(cfg.labeled.as_ref().unwrap(), &cfg.work_dir.join("data/labeled/labeled.manifest"));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.resolved().unwrap(), cfg);
    }
}
