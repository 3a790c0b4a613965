use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semidet::detector::sha256_hex;
use semidet::evaluation::EvalReport;
use semidet::synthetic::WorldConfig;
use semidet_cli::{RunConfig, EFFECTIVE_CONFIG};

fn semidet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semidet")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstdout {}\nstderr {}", out.status, String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

/// Small world and short training, written as a config file.
fn config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig {
        work_dir: dir.join("work"),
        world: WorldConfig { width: 48, height: 48, ..Default::default() },
        ..Default::default()
    };
    cfg.train.max_epochs = 3;
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_then_teacher_writes_baseline_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    ok(&semidet(&["gen", "--images", "10", "--config", s(&cfg)]));
    ok(&semidet(&["teacher", "--config", s(&cfg)]));
    let work = dir.path().join("work");
    let report = EvalReport::load(work.join("eval_teacher.report")).unwrap();
    assert!((0.0..=1.0).contains(&report.map));
    assert!(work.join("teacher.ckpt").exists());
    assert!(work.join(EFFECTIVE_CONFIG).exists());
}

#[test]
fn scripted_desk_run_produces_final_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let c = s(&cfg);
    ok(&semidet(&["gen", "--images", "8", "--unlabeled-images", "12", "--val-images", "6", "--config", c]));
    ok(&semidet(&["teacher", "--config", c]));
    ok(&semidet(&["pseudo", "--config", c]));
    ok(&semidet(&["student", "--config", c, "--policy", "doubt", "--tau-l", "0.3", "--tau-h", "0.8"]));
    let out = semidet(&["finetune", "--config", c]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains(" → "));
    let work = dir.path().join("work");
    let model = work.join("student_ft.ckpt");
    ok(&semidet(&["eval", "--config", c, "--model", s(&model)]));
    let report = EvalReport::load(work.join("eval.report")).unwrap();
    assert!((0.0..=1.0).contains(&report.map));
    assert_eq!(report, EvalReport::load(work.join("eval_student_ft.report")).unwrap());
    let applied = semidet::annotations::load_manifest(work.join("pseudo_applied.manifest")).unwrap();
    assert!(applied.is_policy_applied());
}

#[test]
fn eval_with_mismatched_catalog_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    ok(&semidet(&["gen", "--images", "4", "--config", s(&cfg)]));
    ok(&semidet(&["teacher", "--config", s(&cfg), "--max-epochs", "1"]));

    let mut other = RunConfig { work_dir: dir.path().join("other"), ..Default::default() };
    other.world = WorldConfig { width: 48, height: 48, ..Default::default() };
    other.world.classes.truncate(2);
    let other_cfg = dir.path().join("other.json");
    fs::write(&other_cfg, serde_json::to_string(&other).unwrap()).unwrap();
    ok(&semidet(&["gen", "--images", "3", "--config", s(&other_cfg)]));

    let model = dir.path().join("work/teacher.ckpt");
    let gt = dir.path().join("other/data/val/val.manifest");
    let out = semidet(&["eval", "--config", s(&cfg), "--model", s(&model), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    for args in [
        vec!["teacher", "--bogus"],
        vec!["student", "--policy", "doubt", "--tau-l", "0.99", "--tau-h", "0.9"],
        vec!["student", "--policy", "quadruple"],
        vec!["teacher", "--detector", "reference", "--backend-cmd", "x"],
        vec!["teacher", "--work-dir", s(&w)],
    ] {
        let out = semidet(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(semidet(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    ok(&semidet(&["gen", "--images", "3", "--config", s(&cfg)]));
    let out = semidet(&["teacher", "--config", s(&cfg), "--backend-cmd", "/nonexistent/backend"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn effective_config_shows_flag_values_and_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    ok(&semidet(&["gen", "--images", "6", "--config", s(&cfg)]));
    ok(&semidet(&["teacher", "--config", s(&cfg), "--seed", "9", "--nms-iou", "0.45"]));
    let work = dir.path().join("work");
    let echo_path = dir.path().join("echo.json");
    fs::copy(work.join(EFFECTIVE_CONFIG), &echo_path).unwrap();
    let echo: RunConfig = serde_json::from_str(&fs::read_to_string(&echo_path).unwrap()).unwrap();
    assert_eq!(echo.seed, 9);
    assert_eq!(echo.nms_iou, 0.45);
    assert_eq!(echo.train.max_epochs, 3);
    let first = sha256_hex(&fs::read(work.join("teacher.ckpt")).unwrap());
    ok(&semidet(&["teacher", "--config", s(&echo_path)]));
    assert_eq!(sha256_hex(&fs::read(work.join("teacher.ckpt")).unwrap()), first);
}

#[test]
fn iterate_and_grid_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let c = s(&cfg);
    ok(&semidet(&["gen", "--images", "6", "--config", c]));
    let out = semidet(&["iterate", "--config", c, "--rounds", "2", "--policy", "single", "--tau-h", "0.6"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("1,") || l.starts_with("2,")).count(), 2, "{text}");
    let work = dir.path().join("work");
    assert!(work.join("round_2/student_ft.ckpt").exists());

    ok(&semidet(&["teacher", "--config", c]));
    ok(&semidet(&["pseudo", "--config", c]));
    let out = semidet(&["grid", "--config", c, "--policy", "doubt", "--tau-l-grid", "0.3,0.5", "--tau-h-grid", "0.6,0.9"]);
    ok(&out);
    let table = fs::read_to_string(work.join("grid.csv")).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("best: "));
}

#[test]
fn reference_backend_process_drives_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let c = s(&cfg);
    let backend = env!("CARGO_BIN_EXE_semidet-refbackend");
    ok(&semidet(&["gen", "--images", "5", "--config", c]));
    ok(&semidet(&["teacher", "--config", c, "--backend-cmd", backend]));
    let via_backend = EvalReport::load(dir.path().join("work/eval_teacher.report")).unwrap();
    ok(&semidet(&["pseudo", "--config", c, "--backend-cmd", backend]));
    ok(&semidet(&["student", "--config", c, "--backend-cmd", backend]));
    ok(&semidet(&["teacher", "--config", c]));
    let in_process = EvalReport::load(dir.path().join("work/eval_teacher.report")).unwrap();
    assert_eq!(via_backend, in_process);
}
