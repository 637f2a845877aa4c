//! Behavioral tests for the `cvfcn` binary: exit-code contract, the
//! `CVFCN_SEED` override, the memorization sanity run, and
//! predict/eval self-consistency on a freshly trained checkpoint.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cvfcn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process was killed by a signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Two-class scene with near-orthogonal diagonal covariances; trivially
/// separable, so short training runs reach high accuracy.
const TWO_CLASS_SPEC: &str = r#"{
  "height": 64, "width": 64, "looks": 9, "seed": 3,
  "classes": [
    {"cov": [[[4.0,0],[0,0],[0,0]], [[0,0],[0.25,0],[0,0]], [[0,0],[0,0],[0.25,0]]]},
    {"cov": [[[0.25,0],[0,0],[0,0]], [[0,0],[4.0,0],[0,0]], [[0,0],[0,0],[0.25,0]]]}
  ],
  "layout": [
    {"class": 1, "x": 0, "y": 0, "w": 32, "h": 64},
    {"class": 2, "x": 32, "y": 0, "w": 32, "h": 64}
  ]
}"#;

struct Scene {
    _dir: tempfile::TempDir,
    cube: PathBuf,
    labels: PathBuf,
}

fn make_scene() -> Scene {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.json");
    std::fs::write(&spec, TWO_CLASS_SPEC).unwrap();
    let cube = dir.path().join("scene.cvt");
    let labels = dir.path().join("scene.pgm");
    let out = bin()
        .arg("synth")
        .arg("--spec")
        .arg(&spec)
        .arg("--out-cube")
        .arg(&cube)
        .arg("--out-labels")
        .arg(&labels)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "synth failed: {}", String::from_utf8_lossy(&out.stderr));
    Scene { _dir: dir, cube, labels }
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

// ------------------------------------------------------------ exit codes

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["train"])), 1); // missing required flags
    assert_eq!(code(&run(&["init-stats", "--fan-in", "8", "--samples", "0"])), 1);
    let out = bin()
        .args(["init-stats", "--fan-in", "8", "--samples", "10"])
        .env("CVFCN_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    assert_eq!(code(&run(&["predict", "--checkpoint", "/no/such.cvm", "--cube", "/no/such.cvt", "--out-map", "/tmp/x.pgm"])), 2);
    assert_eq!(code(&run(&["eval", "--pred", "/no/such.pgm", "--truth", "/no/such.pgm"])), 2);
}

#[test]
fn bad_spec_json_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, "{\"height\": }").unwrap();
    let out = run(&[
        "synth", "--spec", path(&spec),
        "--out-cube", path(&dir.path().join("c.cvt")),
        "--out-labels", path(&dir.path().join("l.pgm")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn corrupted_gradient_exits_3() {
    let out = run(&["gradcheck", "--corrupt"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn env_seed_overrides_flag() {
    let with_flag = run(&["init-stats", "--fan-in", "8", "--samples", "50", "--seed", "99"]);
    let with_env = bin()
        .args(["init-stats", "--fan-in", "8", "--samples", "50", "--seed", "0"])
        .env("CVFCN_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(stdout(&with_flag), stdout(&with_env));
    let baseline = run(&["init-stats", "--fan-in", "8", "--samples", "50", "--seed", "0"]);
    assert_ne!(stdout(&with_flag), stdout(&baseline));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = make_scene();
    let b = make_scene();
    assert_eq!(std::fs::read(&a.cube).unwrap(), std::fs::read(&b.cube).unwrap());
    assert_eq!(std::fs::read(&a.labels).unwrap(), std::fs::read(&b.labels).unwrap());
}

// ------------------------------------------------------------------ eval

#[test]
fn eval_perfect_map_and_empty_exclusion() {
    let s = make_scene();
    // The truth map scored against itself is a perfect prediction.
    let out = run(&["eval", "--pred", path(&s.labels), "--truth", path(&s.labels)]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["oa"].as_f64().unwrap(), 1.0);
    assert_eq!(v["kappa"].as_f64().unwrap(), 1.0);
    // Excluding every labeled pixel leaves nothing to score.
    let out = run(&[
        "eval", "--pred", path(&s.labels), "--truth", path(&s.labels),
        "--exclude-mask", path(&s.labels),
    ]);
    assert_eq!(code(&out), 2);
}

// -------------------------------------------------------------- training

#[test]
fn overfit_mode_memorizes_one_patch() {
    let s = make_scene();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let out = run(&[
        "train", "--cube", path(&s.cube), "--labels", path(&s.labels),
        "--out-checkpoint", path(&dir.path().join("m.cvm")), "--out-log", path(&log),
        "--overfit", "1", "--window", "64", "--stride", "64", "--batch", "1",
        "--epochs", "500", "--lr", "2e-3", "--width-scale", "1/4",
        "--keep-prob", "1.0", "--frac-per-class", "0.05", "--seed", "5",
        "--fixed-clock",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&log).unwrap();
    let best = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.01, "memorization loss only reached {best:.4}");
}

#[test]
fn loss_variants_log_the_same_schema() {
    let s = make_scene();
    let dir = tempfile::tempdir().unwrap();
    for loss in ["ace", "cmse"] {
        let log = dir.path().join(format!("{loss}.csv"));
        let out = run(&[
            "train", "--cube", path(&s.cube), "--labels", path(&s.labels),
            "--out-checkpoint", path(&dir.path().join(format!("{loss}.cvm"))),
            "--out-log", path(&log),
            "--epochs", "2", "--batch", "8", "--window", "32", "--stride", "32",
            "--width-scale", "1/12", "--keep-prob", "1.0", "--seed", "4",
            "--loss", loss,
        ]);
        assert_eq!(code(&out), 0, "{loss}: {}", String::from_utf8_lossy(&out.stderr));
        let csv = std::fs::read_to_string(&log).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,val_oa,wall_seconds"));
        assert_eq!(lines.count(), 2);
    }
}

/// A checkpoint scored on its own training scene reproduces the logged
/// validation accuracy.
#[test]
fn predict_matches_logged_validation_accuracy() {
    let s = make_scene();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.cvm");
    let out = run(&[
        "train", "--cube", path(&s.cube), "--labels", path(&s.labels),
        "--out-checkpoint", path(&ckpt), "--out-log", path(&dir.path().join("log.csv")),
        "--epochs", "12", "--batch", "8", "--window", "32", "--stride", "32",
        "--width-scale", "1/4", "--lr", "2e-3", "--keep-prob", "1.0", "--seed", "6",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout(&out);
    let tokens: Vec<&str> = summary.split_whitespace().collect();
    let pos = tokens.iter().position(|t| *t == "val_oa").expect("summary line");
    let val_oa: f64 = tokens[pos + 1].trim_end_matches(';').parse().unwrap();

    let map = dir.path().join("pred.pgm");
    let out = run(&["predict", "--checkpoint", path(&ckpt), "--cube", path(&s.cube), "--out-map", path(&map)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("pred.ppm").exists(), "colorized map missing");

    let out = run(&["eval", "--pred", path(&map), "--truth", path(&s.labels)]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    let oa = v["oa"].as_f64().unwrap();
    assert!(
        (oa - val_oa).abs() <= 0.005,
        "scene OA {oa:.4} vs logged val OA {val_oa:.4}"
    );
}
