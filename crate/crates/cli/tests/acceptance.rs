use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use tracernet_cli::stages::{self, GradeSummary, LOSS_CURVE_FILE, TABLE_CSV, TRANSITION_FILE};
use tracernet_cli::{emit_csv, export_image, parse_config, read_csv, read_pgm, ExperimentConfig, Workspace};
use tracernet_core::evaluator::{grade_reflux, transition_matrix, GraderConfig, RegionMasks};
use tracernet_core::phantom::{generate_cohort, CohortSubject, GradeMix, PhantomConfig, SCHEDULE, TARGET_TIME};
use tracernet_core::preprocess::{assemble_sample, normalized_pair, Dataset, Split};
use tracernet_core::selftest::{conv_oracle, gradient_suite};
use tracernet_core::tensor::{read_glt_from, write_glt_to, Tensor};
use tracernet_core::trainer::{train, TrainConfig};
use tracernet_core::unet::{load_checkpoint, save_checkpoint, UNet, UNetConfig};

const SEEDS: [u64; 3] = [1, 2, 3];
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const OVERFIT_LOSS: f64 = 1e-4;
const ORDERING_BUDGET: Duration = Duration::from_secs(45 * 60);
const ORDERING_RATIO: f64 = 1.5;
const DIAGONAL_MASS: f64 = 0.70;
const ROW_SUM_TOLERANCE: f64 = 1e-9;
const MASS_CAP: f64 = 0.25;
const LATE_MASS_SHARE: f64 = 0.01;

const ORDERING_CONFIG: &str = "\
cohort.n = 96
cohort.train_fraction = 0.75
cohort.grid_size = 64
model.base_features = 16
model.depth = 2
training.loss_kind = l2
training.epochs = 150
ablation.pre-injection = 0
ablation.1-2h = 1.5
ablation.1-9h = 1.5,4,6,8
";

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let status = if o.passed { "pass" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{status}] criterion {n} {name}: {}", o.detail);
    let _ = out.flush();
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let checks = gradient_suite(0);
    let elapsed = start.elapsed();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {:.2e}", c.name, c.max_relative_error))
        .collect();
    let worst = checks.iter().map(|c| c.max_relative_error / c.tolerance).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && elapsed < GRADIENT_BUDGET,
        format!("{} checks, worst error/tolerance {worst:.2e}, failed {failed:?}, {elapsed:.1?}", checks.len()),
    )
}

fn conv_bit_equality() -> Outcome {
    let mismatches = conv_oracle(200, 11);
    outcome(mismatches == 0, format!("{mismatches} of 200 random cases differ from the nested-loop reference"))
}

fn overfit_one_batch() -> Outcome {
    let cohort = generate_cohort(8, 5, &GradeMix::default(), &PhantomConfig::default()).unwrap();
    let samples = cohort
        .subjects
        .iter()
        .map(|s| assemble_sample(&s.series(), &[1.5], TARGET_TIME).unwrap())
        .collect();
    let batch = Dataset::new(Split::Train, samples).unwrap();
    let empty = Dataset::new(Split::Test, Vec::new()).unwrap();
    let mut net = UNet::new(UNetConfig { in_channels: 2, out_channels: 2, base_features: 8, depth: 2, seed: 0 }).unwrap();
    let cfg = TrainConfig { epochs: 200, batch_size: 8, learning_rate: 1e-3, seed: 0, ..TrainConfig::default() };
    let start = Instant::now();
    let curve = train(&mut net, &batch, &empty, &cfg).unwrap();
    let elapsed = start.elapsed();
    let last = curve.last().unwrap().train_loss;
    let first = curve.records[0].train_loss;
    outcome(
        last < OVERFIT_LOSS && elapsed < OVERFIT_BUDGET,
        format!("train loss {first:.3e} -> {last:.3e} after 200 epochs (target < {OVERFIT_LOSS:.0e}), {elapsed:.1?}"),
    )
}

fn config(text: &str, workspace: &Path) -> ExperimentConfig {
    let mut cfg = parse_config(text).unwrap();
    cfg.workspace = workspace.to_path_buf();
    cfg
}

/// Trains, evaluates and grades every ablation for every seed.
fn run_seeds(cfg: &ExperimentConfig, ws: &Workspace) -> Vec<Vec<GradeSummary>> {
    stages::simulate(cfg, ws).unwrap();
    stages::preprocess(cfg, ws, None).unwrap();
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = ExperimentConfig { training: TrainConfig { seed, ..cfg.training.clone() }, ..cfg.clone() };
            stages::train(&cfg, ws, None).unwrap();
            stages::predict(&cfg, ws, None).unwrap();
            stages::evaluate(&cfg, ws, None).unwrap();
            stages::grade(&cfg, ws, None).unwrap()
        })
        .collect()
}

struct OrderingRuns {
    outcome: Outcome,
    mse_early_l2: f64,
    early_grades: Vec<GradeSummary>,
    early_transition_files: Vec<String>,
}

fn ordering(root: &Path) -> OrderingRuns {
    let cfg = config(ORDERING_CONFIG, root);
    let ws = Workspace::new(root);
    let start = Instant::now();
    let grades = run_seeds(&cfg, &ws);
    let table = stages::report(&cfg, &ws).unwrap();
    let elapsed = start.elapsed();
    let mse = |label: &str| table.iter().find(|r| r.label == label).unwrap().test_mse;
    let (pre, early, all) = (mse("pre-injection"), mse("1-2h"), mse("1-9h"));
    let ratio = pre / early;
    let passed = all <= early && early < pre && ratio >= ORDERING_RATIO && elapsed < ORDERING_BUDGET;
    let early_idx = cfg.ablations.iter().position(|a| a.label == "1-2h").unwrap();
    OrderingRuns {
        outcome: outcome(
            passed,
            format!(
                "seed-mean test MSE pre-injection {pre:.3e}, 1-2h {early:.3e}, 1-9h {all:.3e}; ratio {ratio:.2} \
                 (target >= {ORDERING_RATIO}); {elapsed:.0?}"
            ),
        ),
        mse_early_l2: early,
        early_grades: grades.into_iter().map(|mut per_seed| per_seed.swap_remove(early_idx)).collect(),
        early_transition_files: SEEDS
            .iter()
            .map(|&s| fs::read_to_string(ws.run_dir("1-2h", s).join(TRANSITION_FILE)).unwrap())
            .collect(),
    }
}

fn loss_kinds(root: &Path, mse_l2: f64) -> Outcome {
    let text = ORDERING_CONFIG.replace("training.loss_kind = l2", "training.loss_kind = l1");
    let text: String = text.lines().filter(|l| !l.starts_with("ablation.") || l.starts_with("ablation.1-2h")).map(|l| format!("{l}\n")).collect();
    let cfg = config(&text, root);
    let ws = Workspace::new(root);
    run_seeds(&cfg, &ws);
    let mse_l1 = stages::report(&cfg, &ws).unwrap()[0].test_mse;
    outcome(mse_l2 <= mse_l1, format!("1-2h seed-mean test MSE: L2 {mse_l2:.3e}, L1 {mse_l1:.3e}"))
}

fn grader_calibration() -> Outcome {
    let mut phantom = PhantomConfig::default();
    phantom.render = phantom.render.noise_free();
    let mix = GradeMix(vec![(0, 1.0 / 3.0), (3, 1.0 / 3.0), (4, 1.0 / 3.0)]);
    let cohort = generate_cohort(60, 17, &mix, &phantom).unwrap();
    let mut wrong = Vec::new();
    let mut per_grade = [0usize; 5];
    for s in cohort.subjects.iter().map(CohortSubject::series) {
        per_grade[s.grade as usize] += 1;
        let baseline = normalized_pair(&s, 0.0).unwrap();
        let target = normalized_pair(&s, TARGET_TIME).unwrap();
        let g = grade_reflux(&baseline, &target, None, &RegionMasks::from_series(&s), &GraderConfig::default()).unwrap();
        if g.grade != s.grade {
            wrong.push(format!("{} {}->{}", s.id, s.grade, g.grade));
        }
    }
    outcome(
        wrong.is_empty() && per_grade == [20, 0, 0, 20, 20],
        format!("{} of 60 recovered (grades 0/3/4: {}/{}/{}); misgraded {wrong:?}", 60 - wrong.len(), per_grade[0], per_grade[3], per_grade[4]),
    )
}

fn transition_fidelity(summaries: &[GradeSummary], files: &[String]) -> Outcome {
    let (truth, predicted): (Vec<u8>, Vec<u8>) =
        summaries.iter().flat_map(|s| s.records.iter().map(|r| (r.true_grade, r.predicted_grade))).unzip();
    let m = transition_matrix(&truth, &predicted).unwrap();
    let mut rows_ok = true;
    for g in 0..5 {
        if m.row_counts[g] > 0 {
            rows_ok &= (m.rates[g].iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOLERANCE;
        }
    }
    for text in files {
        for line in text.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            let sum: f64 = cells[1..6].iter().map(|v| v.parse::<f64>().unwrap()).sum();
            if cells[6] != "0" {
                rows_ok &= (sum - 1.0).abs() <= ROW_SUM_TOLERANCE;
            }
        }
    }
    let mass = m.diagonal_mass();
    let rows: Vec<String> = (0..5)
        .filter(|&g| m.row_counts[g] > 0)
        .map(|g| format!("grade {g}: {:?}", m.counts[g]))
        .collect();
    outcome(
        mass >= DIAGONAL_MASS && rows_ok,
        format!("diagonal mass {mass:.3} over {} test predictions (target >= {DIAGONAL_MASS}); rows sum to 1: {rows_ok}; {}", truth.len(), rows.join(", ")),
    )
}

const DETERMINISM_CONFIG: &str = "\
cohort.n = 16
cohort.train_fraction = 0.75
model.base_features = 8
training.epochs = 6
training.seed = 4
ablation.1-2h = 1.5
ablation.3-5h = 4
";

fn determinism(root: &Path) -> Outcome {
    let mut problems = Vec::new();
    let runs: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> = ["a", "b"]
        .iter()
        .map(|name| {
            let cfg = config(DETERMINISM_CONFIG, &root.join(name));
            let ws = Workspace::new(&cfg.workspace);
            stages::simulate(&cfg, &ws).unwrap();
            stages::preprocess(&cfg, &ws, None).unwrap();
            stages::train(&cfg, &ws, None).unwrap();
            stages::predict(&cfg, &ws, None).unwrap();
            stages::evaluate(&cfg, &ws, None).unwrap();
            stages::grade(&cfg, &ws, None).unwrap();
            stages::report(&cfg, &ws).unwrap();
            let run = ws.run_dir("1-2h", 4);
            (
                fs::read(run.join(LOSS_CURVE_FILE)).unwrap(),
                fs::read(ws.reports_dir().join(TABLE_CSV)).unwrap(),
                fs::read(run.join(stages::CHECKPOINT_FILE)).unwrap(),
            )
        })
        .collect();
    if runs[0].0 != runs[1].0 {
        problems.push("loss curves differ");
    }
    if runs[0].1 != runs[1].1 {
        problems.push("reports differ");
    }
    if runs[0].2 != runs[1].2 {
        problems.push("checkpoints differ");
    }

    let cfg = config(DETERMINISM_CONFIG, &root.join("a"));
    let ws = Workspace::new(&cfg.workspace);
    let ckpt = ws.run_dir("1-2h", 4).join(stages::CHECKPOINT_FILE);
    let a = cfg.ablation("1-2h").unwrap();
    let net: UNet<f32> = load_checkpoint(&ckpt, cfg.unet_config(a, 4).unwrap()).unwrap();
    let resaved = root.join("resaved.glck");
    save_checkpoint(&net, &resaved).unwrap();
    if fs::read(&resaved).unwrap() != fs::read(&ckpt).unwrap() {
        problems.push("checkpoint round trip");
    }

    let t = Tensor::<f32>::from_fn(&[3, 5, 7], |i| (i as f32 * 0.37).sin() * 1e-3 + f32::EPSILON * i as f32);
    let mut buf = Vec::new();
    write_glt_to(&mut buf, &t).unwrap();
    let back: Tensor<f32> = read_glt_from(&mut buf.as_slice()).unwrap();
    if back.shape() != t.shape() || back.data().iter().zip(t.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
        problems.push("GLT round trip");
    }

    let img = Tensor::<f32>::from_fn(&[9, 11], |i| ((i * 7919) % 65536) as f32 / 65535.0);
    let pgm = root.join("x.pgm");
    export_image(&img, &pgm).unwrap();
    let (h, w, px) = read_pgm(&pgm).unwrap();
    let expect: Vec<u16> = img.data().iter().map(|&v| (v as f64 * 65535.0).round() as u16).collect();
    if (h, w) != (9, 11) || px != expect {
        problems.push("PGM round trip");
    }

    let rows: Vec<Vec<String>> = vec![
        vec!["a,b".into(), "say \"x\"".into(), "1e-3".into()],
        vec![format!("{:?}", 0.1 + 0.2), format!("{:?}", f64::MIN_POSITIVE), "-0.0".into()],
    ];
    let csv = root.join("x.csv");
    emit_csv(&rows, &csv).unwrap();
    if read_csv(&csv).unwrap() != rows {
        problems.push("CSV round trip");
    }
    outcome(problems.is_empty(), if problems.is_empty() { "two workspaces identical; all round trips bit-exact".into() } else { format!("{problems:?}") })
}

fn simulator_contracts() -> Outcome {
    let cohort = generate_cohort(100, 99, &GradeMix::default(), &PhantomConfig::default()).unwrap();
    let target = SCHEDULE.iter().position(|&t| t == TARGET_TIME).unwrap();
    let mut problems = Vec::new();
    let (mut max_mass, mut max_late) = (0.0f64, 0.0f64);
    let mut ratios: [Vec<f64>; 5] = Default::default();
    for s in &cohort.subjects {
        for p in 0..2 {
            let m: Vec<f64> = s.masses.iter().map(|m| m[p]).collect();
            let peak = m[target];
            if m.iter().enumerate().any(|(k, &v)| k != target && v >= peak) {
                problems.push(format!("{} plane {p}: peak not at 24 h", s.subject.id));
            }
            max_mass = m.iter().copied().fold(max_mass, f64::max);
            max_late = max_late.max(m[m.len() - 1] / peak);
        }
        let series = s.series();
        let baseline = normalized_pair(&series, 0.0).unwrap();
        let at = normalized_pair(&series, TARGET_TIME).unwrap();
        let g = grade_reflux(&baseline, &at, None, &RegionMasks::from_series(&series), &GraderConfig::default()).unwrap();
        ratios[s.subject.true_grade as usize].push(g.stats.ratio);
    }
    let range = |v: &[f64]| (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (r0, r3, r4) = (range(&ratios[0]), range(&ratios[3]), range(&ratios[4]));
    let monotone = r0.1 < r3.0 && r3.1 < r4.0;
    let passed = problems.is_empty() && max_mass <= MASS_CAP && max_late < LATE_MASS_SHARE && monotone;
    outcome(
        passed,
        format!(
            "100 subjects; peak misplaced {}; max mass {max_mass:.4} (cap {MASS_CAP}); max 29-day/peak {max_late:.2e}; \
             ratio ranges g0 [{:.3}, {:.3}] g3 [{:.3}, {:.3}] g4 [{:.3}, {:.3}]",
            problems.len(),
            r0.0,
            r0.1,
            r3.0,
            r3.1,
            r4.0,
            r4.1
        ),
    )
}

#[test]
fn primary_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        results.push((n, o.passed));
    };
    record(1, "gradient suite", gradient_checks());
    record(2, "convolution oracle", conv_bit_equality());
    record(3, "overfit one batch", overfit_one_batch());
    record(6, "grader calibration", grader_calibration());
    record(9, "simulator contracts", simulator_contracts());
    record(8, "determinism and persistence", determinism(&dir.path().join("determinism")));
    let runs = ordering(&dir.path().join("ordering"));
    record(4, "ablation ordering", runs.outcome);
    record(7, "transition matrix fidelity", transition_fidelity(&runs.early_grades, &runs.early_transition_files));
    record(5, "loss kind comparison", loss_kinds(&dir.path().join("l1"), runs.mse_early_l2));
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
