use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tracernet_cli::stages::{GRADES_FILE, LOSS_CURVE_FILE, METRICS_FILE, TABLE_CSV, TRANSITION_FILE};
use tracernet_cli::workspace::RESOLVED_CONFIG;
use tracernet_cli::{dispatch, parse_config, read_csv, read_pgm, CliError, Workspace};
use tracernet_core::preprocess::read_datasets;
use tracernet_core::tensor::read_glt;

const SMALL: &str = "\
cohort.n = 8
cohort.train_fraction = 0.75
model.base_features = 4
training.epochs = 2
training.batch_size = 4
ablation.pre = 0
ablation.early = 1.5
";

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, format!("{SMALL}{extra}")).unwrap();
    let ws = dir.path().join("ws");
    (dir, conf, ws)
}

fn run(conf: &Path, ws: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["tracernet".to_string(), "--config".into(), conf.display().to_string()];
    argv.extend(["--workspace".to_string(), ws.display().to_string()]);
    argv.extend(args.iter().map(|s| s.to_string()));
    dispatch(argv)
}

fn all_stages(conf: &Path, ws: &Path) {
    for stage in ["simulate", "preprocess", "train", "predict", "evaluate", "grade", "report"] {
        assert_eq!(run(conf, ws, &[stage]), 0, "{stage}");
    }
}

fn mean_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.clamp(0.0, 1.0) as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn stages_produce_consistent_artifacts() {
    let (_dir, conf, ws_root) = setup("");
    all_stages(&conf, &ws_root);
    let ws = Workspace::new(&ws_root);
    let run_dir = ws.run_dir("early", 0);
    for f in ["checkpoint.glck", LOSS_CURVE_FILE, METRICS_FILE, GRADES_FILE, TRANSITION_FILE, RESOLVED_CONFIG] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(run_dir.join(LOSS_CURVE_FILE)).unwrap();
    assert!(curve.starts_with("epoch,train_loss,test_loss"));
    assert_eq!(curve.lines().count(), 3);

    let (_, test_set) = read_datasets(&ws.dataset_dir("early")).unwrap();
    assert_eq!(test_set.len(), 2);
    let mut total = 0.0;
    for s in &test_set.samples {
        let p = read_glt::<f32>(run_dir.join("predictions/test").join(format!("{}.glt", s.subject_id))).unwrap();
        assert_eq!(p.shape(), s.target.shape());
        total += mean_sq(p.data(), s.target.data());
        let (h, w, px) = read_pgm(&run_dir.join("images").join(format!("{}_axial_prediction.pgm", s.subject_id))).unwrap();
        assert_eq!((h, w, px.len()), (64, 64, 64 * 64));
    }
    let metrics = read_csv(&run_dir.join(METRICS_FILE)).unwrap();
    let test_mse: f64 = metrics.iter().find(|r| r[0] == "test_mse").unwrap()[1].parse().unwrap();
    assert!((test_mse - total / test_set.len() as f64).abs() < 1e-9, "{test_mse}");

    let grades = read_csv(&run_dir.join(GRADES_FILE)).unwrap();
    assert_eq!(grades[0], ["subject_id", "true_grade", "real_grade", "predicted_grade", "real_ratio", "predicted_ratio"]);
    assert_eq!(grades.len(), 1 + test_set.len());
    let transition = read_csv(&run_dir.join(TRANSITION_FILE)).unwrap();
    let mut counted = 0;
    for row in &transition[1..] {
        let sum: f64 = row[1..6].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        let n: usize = row[6].parse().unwrap();
        assert!(if n == 0 { sum == 0.0 } else { (sum - 1.0).abs() < 1e-9 });
        counted += n;
    }
    assert_eq!(counted, test_set.len());

    let table = read_csv(&ws.reports_dir().join(TABLE_CSV)).unwrap();
    assert_eq!(table[0], ["metric", "pre", "early"]);
    assert!(!ws_root.join(".lock").exists());
}

#[test]
fn resolved_config_reproduces_run_bit_exactly() {
    let (dir, conf, ws) = setup("training.seed = 3\n");
    all_stages(&conf, &ws);
    let run_dir = Workspace::new(&ws).run_dir("pre", 3);
    let copy = dir.path().join("copy.conf");
    fs::copy(run_dir.join(RESOLVED_CONFIG), &copy).unwrap();
    let ws2 = dir.path().join("ws2");
    all_stages(&copy, &ws2);
    let run2 = Workspace::new(&ws2).run_dir("pre", 3);
    for f in [LOSS_CURVE_FILE, METRICS_FILE, GRADES_FILE, "checkpoint.glck"] {
        assert_eq!(fs::read(run_dir.join(f)).unwrap(), fs::read(run2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_selects_run_directory() {
    let (_dir, conf, ws) = setup("");
    for stage in ["simulate", "preprocess"] {
        assert_eq!(run(&conf, &ws, &[stage]), 0);
    }
    assert_eq!(run(&conf, &ws, &["--label", "early", "--seed", "7", "train"]), 0);
    let w = Workspace::new(&ws);
    assert!(w.run_dir("early", 7).join(LOSS_CURVE_FILE).exists());
    assert!(!w.run_dir("pre", 7).exists());
    assert_eq!(run(&conf, &ws, &["--label", "missing", "train"]), 1);
}

#[test]
fn missing_upstream_artifact_names_the_stage() {
    let (_dir, conf, ws) = setup("");
    let out = Command::new(env!("CARGO_BIN_EXE_tracernet"))
        .args(["--config", conf.to_str().unwrap(), "--workspace", ws.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing dataset manifest"), "{stderr}");
    assert!(stderr.contains("run `preprocess` first"), "{stderr}");
}

#[test]
fn changed_cohort_makes_datasets_stale() {
    let (dir, conf, ws) = setup("");
    for stage in ["simulate", "preprocess"] {
        assert_eq!(run(&conf, &ws, &[stage]), 0);
    }
    let other = dir.path().join("other.conf");
    fs::write(&other, SMALL.replace("cohort.n = 8", "cohort.n = 12")).unwrap();
    assert_eq!(run(&other, &ws, &["preprocess"]), 1);
    assert_eq!(run(&other, &ws, &["simulate"]), 0);
    assert_eq!(run(&other, &ws, &["preprocess"]), 0);
}

#[test]
fn held_lock_blocks_a_second_invocation() {
    let (_dir, conf, ws) = setup("");
    let lock = Workspace::new(&ws).lock().unwrap();
    assert_eq!(run(&conf, &ws, &["simulate"]), 1);
    drop(lock);
    assert_eq!(run(&conf, &ws, &["simulate"]), 0);
}

#[test]
fn bad_configuration_is_reported_with_its_line() {
    let err = parse_config("cohort.n = 8\ntraining.epoch = 3\n").unwrap_err();
    assert!(matches!(err, CliError::Config { line: 2, ref key, .. } if key == "training.epoch"), "{err}");
    assert!(parse_config("training.loss_kind = l3").is_err());
    assert!(parse_config("cohort.grid_size = 100").is_err());
    assert!(parse_config("ablation.bad = 3").is_err());
    let (_dir, conf, ws) = setup("model.depth = zero\n");
    assert_eq!(run(&conf, &ws, &["simulate"]), 1);
    assert!(!ws.exists());
}

#[test]
fn usage_errors_exit_with_clap_status() {
    assert_eq!(dispatch(["tracernet", "launch"]), 2);
    assert_eq!(dispatch(["tracernet", "--help"]), 0);
}
