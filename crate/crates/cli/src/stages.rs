//! Pipeline stages. Each reads its inputs from and writes its outputs to
//! the workspace, and refuses to run on artifacts built from a different
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tracernet_core::evaluator::{
    difference_map, eval_metrics, grade_reflux, parse_report_rows, report_rows, format_table, transition_matrix,
    MetricRow, RegionMasks, TransitionMatrix,
};
use tracernet_core::phantom::{
    generate_cohort, load_series, mix_seed, read_manifest, write_cohort, Plane, SubjectSeries, MANIFEST_FILE,
    TARGET_TIME,
};
use tracernet_core::preprocess::{
    assemble_sample, normalized_pair, read_datasets, split_cohort, write_datasets, Dataset, Split, DATASET_MANIFEST,
};
use tracernet_core::selftest::{conv_oracle, gradient_suite};
use tracernet_core::tensor::{read_glt, write_glt, Tensor};
use tracernet_core::trainer::{clamp_unit, predict_raw, train as fit, LossCurve, TrainConfig};
use tracernet_core::unet::{load_checkpoint, save_checkpoint, UNet};

use crate::artifacts::{emit_csv, export_image, fmt_f64, read_csv};
use crate::config::{Ablation, ExperimentConfig};
use crate::workspace::{reset_dir, stamp_matches, write_stamp, Workspace, RESOLVED_CONFIG};
use crate::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.glck";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GRADES_FILE: &str = "grades.csv";
pub const TRANSITION_FILE: &str = "transition.csv";
pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_TEXT: &str = "table.txt";
pub const RUNS_CSV: &str = "runs.csv";
const PREDICTIONS_DIR: &str = "predictions";
const IMAGES_DIR: &str = "images";
const BATCH: usize = 8;
const ORACLE_CASES: usize = 200;

fn cohort_stamp(cfg: &ExperimentConfig) -> String {
    cfg.fingerprint(&["cohort"], None)
}

fn dataset_stamp(cfg: &ExperimentConfig, a: &Ablation) -> String {
    cfg.fingerprint(&["cohort"], Some(a))
}

fn run_stamp(cfg: &ExperimentConfig, a: &Ablation) -> String {
    cfg.fingerprint(&["cohort", "model", "training"], Some(a))
}

pub fn simulate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let dir = ws.cohort_dir();
    let stamp = cohort_stamp(cfg);
    if stamp_matches(&dir, &stamp) && dir.join(MANIFEST_FILE).exists() {
        println!("simulate: cohort up to date");
        return Ok(());
    }
    let start = Instant::now();
    let c = &cfg.cohort;
    let cohort = generate_cohort(c.n, c.seed, &c.grade_mix, &cfg.phantom())?;
    reset_dir(&dir)?;
    write_cohort(&cohort, &dir)?;
    write_stamp(&dir, &stamp)?;
    println!("simulate: {} subjects in {:.1?}", c.n, start.elapsed());
    Ok(())
}

fn require_cohort(cfg: &ExperimentConfig, ws: &Workspace) -> Result<PathBuf> {
    let dir = ws.cohort_dir();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::MissingArtifact { what: "cohort manifest", path: dir, stage: "simulate" });
    }
    if !stamp_matches(&dir, &cohort_stamp(cfg)) {
        return Err(CliError::Stale { what: "cohort", path: dir, stage: "simulate" });
    }
    Ok(dir)
}

/// Every subject of the cohort with its split, in manifest order.
fn load_cohort(cfg: &ExperimentConfig, ws: &Workspace) -> Result<(Vec<SubjectSeries>, Vec<SubjectSeries>)> {
    let dir = require_cohort(cfg, ws)?;
    let records = read_manifest(&dir)?;
    let (train, test) = split_cohort(&records, cfg.cohort.train_fraction, cfg.cohort.seed)?;
    let load = |rs: Vec<_>| rs.iter().map(|r| load_series(&dir, r)).collect::<Result<Vec<_>, _>>();
    Ok((load(train)?, load(test)?))
}

pub fn preprocess(cfg: &ExperimentConfig, ws: &Workspace, label: Option<&str>) -> Result<()> {
    let mut cohort = None;
    for a in cfg.selected(label)? {
        let dir = ws.dataset_dir(&a.label);
        let stamp = dataset_stamp(cfg, a);
        if stamp_matches(&dir, &stamp) && dir.join(DATASET_MANIFEST).exists() {
            println!("preprocess {}: up to date", a.label);
            continue;
        }
        if cohort.is_none() {
            cohort = Some(load_cohort(cfg, ws)?);
        }
        let (train, test) = cohort.as_ref().expect("loaded above");
        let build = |series: &[SubjectSeries], split| -> Result<Dataset> {
            let samples = series.iter().map(|s| assemble_sample(s, &a.times, TARGET_TIME)).collect::<Result<_, _>>()?;
            Ok(Dataset::new(split, samples)?)
        };
        let (tr, te) = (build(train, Split::Train)?, build(test, Split::Test)?);
        reset_dir(&dir)?;
        write_datasets(&dir, &[&tr, &te])?;
        write_stamp(&dir, &stamp)?;
        println!("preprocess {}: {} train / {} test samples", a.label, tr.len(), te.len());
    }
    Ok(())
}

fn require_datasets(cfg: &ExperimentConfig, ws: &Workspace, a: &Ablation) -> Result<(Dataset, Dataset)> {
    let dir = ws.dataset_dir(&a.label);
    if !dir.join(DATASET_MANIFEST).exists() {
        return Err(CliError::MissingArtifact { what: "dataset manifest", path: dir, stage: "preprocess" });
    }
    if !stamp_matches(&dir, &dataset_stamp(cfg, a)) {
        return Err(CliError::Stale { what: "dataset", path: dir, stage: "preprocess" });
    }
    Ok(read_datasets(&dir)?)
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig { seed: mix_seed(cfg.training.seed, 1), ..cfg.training.clone() }
}

/// Trains one ablation and returns its loss curve.
pub fn train_one(cfg: &ExperimentConfig, ws: &Workspace, a: &Ablation) -> Result<LossCurve> {
    let (train_set, test_set) = require_datasets(cfg, ws, a)?;
    let dir = ws.run_dir(&a.label, cfg.training.seed);
    let stamp = run_stamp(cfg, a);
    if stamp_matches(&dir, &stamp) && dir.join(CHECKPOINT_FILE).exists() {
        println!("train {}: up to date", a.label);
        let text = fs::read_to_string(dir.join(LOSS_CURVE_FILE))?;
        return Ok(LossCurve::from_csv(&text)?);
    }
    let start = Instant::now();
    let mut net = UNet::<f32>::new(cfg.unet_config(a, cfg.training.seed)?)?;
    let curve = fit(&mut net, &train_set, &test_set, &train_config(cfg))?;
    reset_dir(&dir)?;
    save_checkpoint(&net, dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(LOSS_CURVE_FILE), curve.to_csv())?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    write_stamp(&dir, &stamp)?;
    let last = curve.last().expect("at least one epoch is recorded");
    println!(
        "train {} seed {}: {} epochs in {:.1?}, train loss {:.3e}, test loss {:.3e}",
        a.label,
        cfg.training.seed,
        last.epoch,
        start.elapsed(),
        last.train_loss,
        last.test_loss
    );
    Ok(curve)
}

pub fn train(cfg: &ExperimentConfig, ws: &Workspace, label: Option<&str>) -> Result<()> {
    for a in cfg.selected(label)? {
        train_one(cfg, ws, a)?;
    }
    Ok(())
}

fn require_run(cfg: &ExperimentConfig, ws: &Workspace, a: &Ablation) -> Result<PathBuf> {
    let dir = ws.run_dir(&a.label, cfg.training.seed);
    if !dir.join(CHECKPOINT_FILE).exists() {
        return Err(CliError::MissingArtifact { what: "checkpoint", path: dir, stage: "train" });
    }
    if !stamp_matches(&dir, &run_stamp(cfg, a)) {
        return Err(CliError::Stale { what: "trained run", path: dir, stage: "train" });
    }
    Ok(dir)
}

fn prediction_path(run: &Path, split: Split, id: &str) -> PathBuf {
    run.join(PREDICTIONS_DIR).join(split.name()).join(format!("{id}.glt"))
}

/// Writes raw network output for both splits.
pub fn predict(cfg: &ExperimentConfig, ws: &Workspace, label: Option<&str>) -> Result<()> {
    for a in cfg.selected(label)? {
        let run = require_run(cfg, ws, a)?;
        let (train_set, test_set) = require_datasets(cfg, ws, a)?;
        let net = load_checkpoint::<f32>(run.join(CHECKPOINT_FILE), cfg.unet_config(a, cfg.training.seed)?)?;
        reset_dir(&run.join(PREDICTIONS_DIR))?;
        for ds in [&train_set, &test_set] {
            fs::create_dir_all(run.join(PREDICTIONS_DIR).join(ds.split.name()))?;
            let inputs: Vec<&Tensor<f32>> = ds.samples.iter().map(|s| &s.input).collect();
            for (s, p) in ds.samples.iter().zip(predict_raw(&net, &inputs, BATCH)?) {
                write_glt(prediction_path(&run, ds.split, &s.subject_id), &p)?;
            }
        }
        println!("predict {}: {} train / {} test", a.label, train_set.len(), test_set.len());
    }
    Ok(())
}

fn load_predictions(run: &Path, ds: &Dataset) -> Result<Vec<Tensor<f32>>> {
    ds.samples
        .iter()
        .map(|s| {
            let path = prediction_path(run, ds.split, &s.subject_id);
            if !path.exists() {
                return Err(CliError::MissingArtifact { what: "prediction", path, stage: "predict" });
            }
            Ok(read_glt(path)?)
        })
        .collect()
}

fn plane_slice(pair: &Tensor<f32>, plane: Plane) -> Result<Tensor<f32>> {
    let [_, h, w] = pair.shape() else {
        return Err(CliError::Image(format!("expected a [2, H, W] pair, got {:?}", pair.shape())));
    };
    let n = h * w;
    let i = plane.index();
    Ok(Tensor::new(vec![*h, *w], pair.data()[i * n..(i + 1) * n].to_vec())?)
}

/// Error metrics for one run, plus prediction, target and difference
/// images for every test subject.
pub fn evaluate_one(cfg: &ExperimentConfig, ws: &Workspace, a: &Ablation) -> Result<MetricRow> {
    let run = require_run(cfg, ws, a)?;
    let (train_set, test_set) = require_datasets(cfg, ws, a)?;
    let raw_test = load_predictions(&run, &test_set)?;
    let test: Vec<Tensor<f32>> = raw_test.iter().cloned().map(clamp_unit).collect();
    let train: Vec<Tensor<f32>> = load_predictions(&run, &train_set)?.into_iter().map(clamp_unit).collect();
    fn targets(ds: &Dataset) -> Vec<&Tensor<f32>> {
        ds.samples.iter().map(|s| &s.target).collect()
    }
    fn refs(v: &[Tensor<f32>]) -> Vec<&Tensor<f32>> {
        v.iter().collect()
    }
    let m_test = eval_metrics(&refs(&test), &targets(&test_set))?;
    let m_train = eval_metrics(&refs(&train), &targets(&train_set))?;
    let m_raw = eval_metrics(&refs(&raw_test), &targets(&test_set))?;
    let curve = LossCurve::from_csv(&fs::read_to_string(run.join(LOSS_CURVE_FILE))?)?;
    let best = curve.best_test().map_or(0, |r| r.epoch);
    let row = MetricRow {
        label: a.label.clone(),
        test_mse: m_test.mse,
        test_mae: m_test.mae,
        train_mse: m_train.mse,
        train_mae: m_train.mae,
        test_mse_raw: m_raw.mse,
        best_test_epoch: best,
    };
    emit_csv(&report_rows(std::slice::from_ref(&row)), &run.join(METRICS_FILE))?;
    let images = run.join(IMAGES_DIR);
    reset_dir(&images)?;
    for (s, p) in test_set.samples.iter().zip(&test) {
        let diff = difference_map(p, &s.target)?;
        for plane in Plane::BOTH {
            for (kind, t) in [("prediction", p), ("target", &s.target), ("difference", &diff)] {
                let path = images.join(format!("{}_{}_{kind}.pgm", s.subject_id, plane.name()));
                export_image(&plane_slice(t, plane)?, &path)?;
            }
        }
    }
    println!(
        "evaluate {} seed {}: test MSE {:.3e}, MAE {:.3e}; train MSE {:.3e}; best epoch {best}",
        a.label, cfg.training.seed, row.test_mse, row.test_mae, row.train_mse
    );
    Ok(row)
}

pub fn evaluate(cfg: &ExperimentConfig, ws: &Workspace, label: Option<&str>) -> Result<Vec<MetricRow>> {
    cfg.selected(label)?.into_iter().map(|a| evaluate_one(cfg, ws, a)).collect()
}

/// Grades of one test subject.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeRecord {
    pub id: String,
    pub true_grade: u8,
    pub real_grade: u8,
    pub predicted_grade: u8,
    pub real_ratio: f64,
    pub predicted_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradeSummary {
    pub records: Vec<GradeRecord>,
    /// Rows are grades of the real 24 h images.
    pub matrix: TransitionMatrix,
}

pub fn grade_one(cfg: &ExperimentConfig, ws: &Workspace, a: &Ablation) -> Result<GradeSummary> {
    let run = require_run(cfg, ws, a)?;
    let (_, test_set) = require_datasets(cfg, ws, a)?;
    let (_, test_series) = load_cohort(cfg, ws)?;
    let predictions = load_predictions(&run, &test_set)?;
    let mut records = Vec::with_capacity(test_set.len());
    for ((sample, series), pred) in test_set.samples.iter().zip(&test_series).zip(predictions) {
        if sample.subject_id != series.id {
            return Err(CliError::Stale { what: "dataset", path: ws.dataset_dir(&a.label), stage: "preprocess" });
        }
        let masks = RegionMasks::from_series(series);
        let baseline = normalized_pair(series, 0.0)?;
        let real = grade_reflux(&baseline, sample.target.data(), None, &masks, &cfg.grader)?;
        let pred = grade_reflux(&baseline, clamp_unit(pred).data(), None, &masks, &cfg.grader)?;
        records.push(GradeRecord {
            id: series.id.clone(),
            true_grade: series.grade,
            real_grade: real.grade,
            predicted_grade: pred.grade,
            real_ratio: real.stats.ratio,
            predicted_ratio: pred.stats.ratio,
        });
    }
    let real: Vec<u8> = records.iter().map(|r| r.real_grade).collect();
    let predicted: Vec<u8> = records.iter().map(|r| r.predicted_grade).collect();
    let matrix = transition_matrix(&real, &predicted)?;
    let mut rows = vec![["subject_id", "true_grade", "real_grade", "predicted_grade", "real_ratio", "predicted_ratio"]
        .map(String::from)
        .to_vec()];
    rows.extend(records.iter().map(|r| {
        vec![
            r.id.clone(),
            r.true_grade.to_string(),
            r.real_grade.to_string(),
            r.predicted_grade.to_string(),
            fmt_f64(r.real_ratio),
            fmt_f64(r.predicted_ratio),
        ]
    }));
    emit_csv(&rows, &run.join(GRADES_FILE))?;
    emit_csv(&matrix.csv_rows(), &run.join(TRANSITION_FILE))?;
    println!("grade {} seed {}: diagonal mass {:.3}", a.label, cfg.training.seed, matrix.diagonal_mass());
    Ok(GradeSummary { records, matrix })
}

pub fn grade(cfg: &ExperimentConfig, ws: &Workspace, label: Option<&str>) -> Result<Vec<GradeSummary>> {
    cfg.selected(label)?.into_iter().map(|a| grade_one(cfg, ws, a)).collect()
}

/// Metrics of every evaluated seed of one ablation, ordered by seed.
pub fn seed_metrics(ws: &Workspace, label: &str) -> Result<Vec<(u64, MetricRow)>> {
    let dir = ws.label_runs(label);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let Some(seed) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("seed-")) else {
            continue;
        };
        let (Ok(seed), true) = (seed.parse::<u64>(), path.join(METRICS_FILE).exists()) else {
            continue;
        };
        let mut rows = parse_report_rows(&read_csv(&path.join(METRICS_FILE))?)?;
        if rows.len() != 1 {
            return Err(CliError::Csv(format!("{} should hold one column", path.join(METRICS_FILE).display())));
        }
        out.push((seed, rows.remove(0)));
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

/// Seed-averaged metrics per ablation, in configuration order. The best
/// epoch is the rounded mean over seeds.
pub fn report(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<MetricRow>> {
    let mut table = Vec::new();
    let mut per_run = Vec::new();
    for a in &cfg.ablations {
        let runs = seed_metrics(ws, &a.label)?;
        if runs.is_empty() {
            continue;
        }
        let k = runs.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| runs.iter().map(|(_, r)| f(r)).sum::<f64>() / k;
        table.push(MetricRow {
            label: a.label.clone(),
            test_mse: mean(|r| r.test_mse),
            test_mae: mean(|r| r.test_mae),
            train_mse: mean(|r| r.train_mse),
            train_mae: mean(|r| r.train_mae),
            test_mse_raw: mean(|r| r.test_mse_raw),
            best_test_epoch: mean(|r| r.best_test_epoch as f64).round() as usize,
        });
        per_run.extend(runs.into_iter().map(|(s, r)| MetricRow { label: format!("{}/seed-{s}", r.label), ..r }));
    }
    if table.is_empty() {
        return Err(CliError::MissingArtifact { what: "evaluated runs", path: ws.root().join("runs"), stage: "evaluate" });
    }
    let dir = ws.reports_dir();
    fs::create_dir_all(&dir)?;
    let rows = report_rows(&table);
    emit_csv(&rows, &dir.join(TABLE_CSV))?;
    emit_csv(&report_rows(&per_run), &dir.join(RUNS_CSV))?;
    let text = format_table(&rows);
    fs::write(dir.join(TABLE_TEXT), &text)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    print!("{text}");
    Ok(table)
}

/// Runs both verification suites and prints one line per check.
pub fn selftest() -> Result<()> {
    let mut failed = 0;
    for check in gradient_suite(0) {
        let ok = check.passed();
        failed += usize::from(!ok);
        println!(
            "{} gradient {}: max relative error {:.2e} (tolerance {:.0e})",
            if ok { "pass" } else { "FAIL" },
            check.name,
            check.max_relative_error,
            check.tolerance
        );
    }
    let mismatches = conv_oracle(ORACLE_CASES, 0);
    failed += usize::from(mismatches > 0);
    println!(
        "{} convolution oracle: {mismatches} of {ORACLE_CASES} cases differ",
        if mismatches == 0 { "pass" } else { "FAIL" }
    );
    if failed > 0 {
        return Err(CliError::Selftest(failed));
    }
    Ok(())
}
