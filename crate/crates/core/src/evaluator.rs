//! Error metrics, difference maps, the reflux grader and grade transition
//! matrices.
//!
//! Images handed to the grader are normalized `[2, H, W]` pairs (sagittal
//! then axial) flattened to one slice; region statistics pool both planes.

use thiserror::Error;

use crate::phantom::{Label, SubjectSeries};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} mask is empty")]
    EmptyMask(&'static str),
    #[error("grade lists differ in length ({real} vs {predicted})")]
    LengthMismatch { real: usize, predicted: usize },
    #[error("invalid grade {0}")]
    Grade(u8),
    #[error("invalid report: {0}")]
    Report(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// MSE and MAE over all samples, planes and pixels jointly.
pub fn eval_metrics(predictions: &[&Tensor<f32>], targets: &[&Tensor<f32>]) -> Result<Metrics> {
    if predictions.len() != targets.len() {
        return Err(EvalError::Shape(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    let (mut se, mut ae, mut n) = (0.0f64, 0.0f64, 0usize);
    for (p, y) in predictions.iter().zip(targets) {
        if p.shape() != y.shape() {
            return Err(EvalError::Shape(format!("prediction {:?} vs target {:?}", p.shape(), y.shape())));
        }
        for (&a, &b) in p.data().iter().zip(y.data()) {
            let d = a as f64 - b as f64;
            se += d * d;
            ae += d.abs();
        }
        n += p.len();
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(Metrics { mse: se / n as f64, mae: ae / n as f64 })
}

pub fn difference_map(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>> {
    if pred.shape() != target.shape() {
        return Err(EvalError::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let mut out = pred.clone();
    out.data_mut().iter_mut().zip(target.data()).for_each(|(p, &y)| *p = (*p - y).abs());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraderConfig {
    /// Minimum mean intensity rise over baseline that counts as enhancement.
    pub enhancement_threshold: f64,
    /// Ventricle/subarachnoid enhancement ratio at which the ventricles count
    /// as isointense with the subarachnoid space.
    pub isointensity_ratio: f64,
}

impl Default for GraderConfig {
    fn default() -> Self {
        Self { enhancement_threshold: 0.1, isointensity_ratio: 0.8 }
    }
}

/// Region masks over a flattened pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub ventricle: Vec<bool>,
    pub sas: Vec<bool>,
    pub aqueduct: Vec<bool>,
}

impl RegionMasks {
    pub fn from_series(series: &SubjectSeries) -> Self {
        let pick = |label: Label| -> Vec<bool> {
            series.labels.iter().flat_map(|plane| plane.iter().map(move |&l| l == label)).collect()
        };
        Self { ventricle: pick(Label::Ventricle), sas: pick(Label::Sas), aqueduct: pick(Label::Aqueduct) }
    }
}

/// Statistics behind a grade decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeStats {
    pub ventricle_enhancement: f64,
    pub sas_enhancement: f64,
    /// Ventricle over subarachnoid enhancement at the target time.
    pub ratio: f64,
    /// Largest ventricle and aqueduct enhancement over the series, if given.
    pub peak_ventricle_enhancement: Option<f64>,
    pub peak_aqueduct_enhancement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefluxGrade {
    pub grade: u8,
    pub stats: GradeStats,
}

fn region_mean(image: &[f32], mask: &[bool], name: &'static str) -> Result<f64> {
    if image.len() != mask.len() {
        return Err(EvalError::Shape(format!("{name} mask has {} cells, image {}", mask.len(), image.len())));
    }
    let (sum, n) = image
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    if n == 0 {
        return Err(EvalError::EmptyMask(name));
    }
    Ok(sum / n as f64)
}

/// Grades ventricular reflux from the 24 h pair against the baseline pair.
/// `series` holds the other post-injection pairs; without it only grades
/// 0, 3 and 4 can be assigned.
pub fn grade_reflux(
    baseline: &[f32],
    at_target: &[f32],
    series: Option<&[&[f32]]>,
    masks: &RegionMasks,
    config: &GraderConfig,
) -> Result<RefluxGrade> {
    let v0 = region_mean(baseline, &masks.ventricle, "ventricle")?;
    let s0 = region_mean(baseline, &masks.sas, "subarachnoid")?;
    let ev = region_mean(at_target, &masks.ventricle, "ventricle")? - v0;
    let es = region_mean(at_target, &masks.sas, "subarachnoid")? - s0;
    let ratio = if es > 0.0 { ev / es } else if ev > 0.0 { f64::INFINITY } else { 0.0 };
    let mut stats = GradeStats {
        ventricle_enhancement: ev,
        sas_enhancement: es,
        ratio,
        peak_ventricle_enhancement: None,
        peak_aqueduct_enhancement: None,
    };
    let theta = config.enhancement_threshold;
    let grade = if ev >= theta {
        if ratio >= config.isointensity_ratio {
            4
        } else {
            3
        }
    } else if let Some(images) = series {
        let a0 = region_mean(baseline, &masks.aqueduct, "aqueduct")?;
        let (mut pv, mut pa) = (ev, f64::NEG_INFINITY);
        for img in images.iter().copied().chain(std::iter::once(at_target)) {
            pv = pv.max(region_mean(img, &masks.ventricle, "ventricle")? - v0);
            pa = pa.max(region_mean(img, &masks.aqueduct, "aqueduct")? - a0);
        }
        stats.peak_ventricle_enhancement = Some(pv);
        stats.peak_aqueduct_enhancement = Some(pa);
        if pv >= theta {
            2
        } else if pa >= theta {
            1
        } else {
            0
        }
    } else {
        0
    };
    Ok(RefluxGrade { grade, stats })
}

/// Row-normalized 5x5 agreement matrix: rows are grades on real images,
/// columns grades on predicted images.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub rates: [[f64; 5]; 5],
    pub counts: [[usize; 5]; 5],
    pub row_counts: [usize; 5],
}

impl TransitionMatrix {
    /// Share of all pairs on the diagonal.
    pub fn diagonal_mass(&self) -> f64 {
        let total: usize = self.row_counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        (0..5).map(|g| self.counts[g][g]).sum::<usize>() as f64 / total as f64
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![["real\\predicted", "0", "1", "2", "3", "4", "count"].map(String::from).to_vec()];
        for g in 0..5 {
            let mut row = vec![g.to_string()];
            row.extend(self.rates[g].iter().map(|v| v.to_string()));
            row.push(self.row_counts[g].to_string());
            rows.push(row);
        }
        rows
    }
}

pub fn transition_matrix(real: &[u8], predicted: &[u8]) -> Result<TransitionMatrix> {
    if real.len() != predicted.len() {
        return Err(EvalError::LengthMismatch { real: real.len(), predicted: predicted.len() });
    }
    let mut counts = [[0usize; 5]; 5];
    for (&r, &p) in real.iter().zip(predicted) {
        if r > 4 || p > 4 {
            return Err(EvalError::Grade(r.max(p)));
        }
        counts[r as usize][p as usize] += 1;
    }
    let mut rates = [[0.0; 5]; 5];
    let mut row_counts = [0usize; 5];
    for g in 0..5 {
        row_counts[g] = counts[g].iter().sum();
        if row_counts[g] > 0 {
            for p in 0..5 {
                rates[g][p] = counts[g][p] as f64 / row_counts[g] as f64;
            }
        }
    }
    Ok(TransitionMatrix { rates, counts, row_counts })
}

/// Errors of one input-stage configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub label: String,
    /// Test errors on clamped predictions.
    pub test_mse: f64,
    pub test_mae: f64,
    pub train_mse: f64,
    pub train_mae: f64,
    /// Test MSE on raw, unclamped network output.
    pub test_mse_raw: f64,
    pub best_test_epoch: usize,
}

const REPORT_METRICS: [&str; 6] = ["test_mse", "test_mae", "train_mse", "train_mae", "test_mse_raw", "best_test_epoch"];

impl MetricRow {
    fn values(&self) -> [String; 6] {
        [
            self.test_mse.to_string(),
            self.test_mae.to_string(),
            self.train_mse.to_string(),
            self.train_mae.to_string(),
            self.test_mse_raw.to_string(),
            self.best_test_epoch.to_string(),
        ]
    }
}

/// One row per metric, one column per configuration.
pub fn report_rows(report: &[MetricRow]) -> Vec<Vec<String>> {
    let mut header = vec!["metric".to_string()];
    header.extend(report.iter().map(|r| r.label.clone()));
    if report.is_empty() {
        return vec![header];
    }
    let values: Vec<[String; 6]> = report.iter().map(MetricRow::values).collect();
    let mut rows = vec![header];
    for (k, name) in REPORT_METRICS.iter().enumerate() {
        let mut row = vec![name.to_string()];
        row.extend(values.iter().map(|v| v[k].clone()));
        rows.push(row);
    }
    rows
}

/// Inverse of [`report_rows`].
pub fn parse_report_rows(rows: &[Vec<String>]) -> Result<Vec<MetricRow>> {
    let bad = |what: String| EvalError::Report(what);
    let header = rows.first().ok_or_else(|| bad("no header".into()))?;
    if header.first().map(String::as_str) != Some("metric") {
        return Err(bad("header must start with `metric`".into()));
    }
    let labels = &header[1..];
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    if rows.len() != REPORT_METRICS.len() + 1 {
        return Err(bad(format!("expected {} metric rows", REPORT_METRICS.len())));
    }
    let mut cols: Vec<Vec<&str>> = vec![Vec::new(); labels.len()];
    for (row, name) in rows[1..].iter().zip(REPORT_METRICS) {
        if row.first().map(String::as_str) != Some(name) || row.len() != labels.len() + 1 {
            return Err(bad(format!("malformed `{name}` row")));
        }
        for (c, v) in row[1..].iter().enumerate() {
            cols[c].push(v);
        }
    }
    labels
        .iter()
        .zip(cols)
        .map(|(label, v)| {
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
            Ok(MetricRow {
                label: label.clone(),
                test_mse: f(v[0])?,
                test_mae: f(v[1])?,
                train_mse: f(v[2])?,
                train_mae: f(v[3])?,
                test_mse_raw: f(v[4])?,
                best_test_epoch: v[5].parse().map_err(|_| bad(format!("`{}` is not an epoch", v[5])))?,
            })
        })
        .collect()
}

/// Fixed-width text rendering of [`report_rows`].
pub fn format_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn metric_arithmetic() {
        let m = eval_metrics(&[&t(&[0.0, 1.0])], &[&t(&[0.0, 0.0])]).unwrap();
        assert_eq!((m.mse, m.mae), (0.5, 0.5));
        let m = eval_metrics(&[&t(&[0.2, 0.3])], &[&t(&[0.2, 0.3])]).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        assert!(matches!(eval_metrics(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn difference_map_of_ones() {
        let d = difference_map(&t(&[1.0, 1.0]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!(d.data(), &[1.0, 1.0]);
    }

    #[test]
    fn transition_rows() {
        let m = transition_matrix(&[3, 3, 3, 3], &[3, 3, 3, 4]).unwrap();
        assert_eq!(m.rates[3], [0.0, 0.0, 0.0, 0.75, 0.25]);
        assert_eq!(m.row_counts, [0, 0, 0, 4, 0]);
        assert_eq!(m.rates[0], [0.0; 5]);
        assert_eq!(m.diagonal_mass(), 0.75);
        assert!(transition_matrix(&[0], &[0, 1]).is_err());
    }

    fn masks() -> RegionMasks {
        // cells: 0-1 ventricle, 2-3 subarachnoid, 4 aqueduct, 5 other
        RegionMasks {
            ventricle: vec![true, true, false, false, false, false],
            sas: vec![false, false, true, true, false, false],
            aqueduct: vec![false, false, false, false, true, false],
        }
    }

    #[test]
    fn grader_decisions() {
        let cfg = GraderConfig::default();
        let base = [0.1f32, 0.1, 0.1, 0.1, 0.1, 0.5];
        let g = |img: &[f32], series: Option<&[&[f32]]>| grade_reflux(&base, img, series, &masks(), &cfg).unwrap().grade;
        assert_eq!(g(&[0.1, 0.1, 0.6, 0.6, 0.1, 0.5], None), 0);
        assert_eq!(g(&[0.35, 0.35, 0.6, 0.6, 0.3, 0.5], None), 3);
        assert_eq!(g(&[0.55, 0.55, 0.6, 0.6, 0.5, 0.5], None), 4);
        let early: &[f32] = &[0.1, 0.1, 0.4, 0.4, 0.4, 0.5];
        assert_eq!(g(&[0.1, 0.1, 0.6, 0.6, 0.1, 0.5], Some(&[early])), 1);
        let transient: &[f32] = &[0.3, 0.3, 0.4, 0.4, 0.4, 0.5];
        assert_eq!(g(&[0.1, 0.1, 0.6, 0.6, 0.1, 0.5], Some(&[transient])), 2);
        let empty = RegionMasks { ventricle: vec![false; 6], ..masks() };
        assert!(matches!(grade_reflux(&base, &base, None, &empty, &cfg), Err(EvalError::EmptyMask(_))));
    }

    #[test]
    fn report_round_trip() {
        let report = vec![
            MetricRow {
                label: "pre-injection".into(),
                test_mse: 7e-3,
                test_mae: 0.03,
                train_mse: 1e-3,
                train_mae: 0.01,
                test_mse_raw: 7.1e-3,
                best_test_epoch: 42,
            },
            MetricRow {
                label: "1-2 h".into(),
                test_mse: 2e-3,
                test_mae: 0.02,
                train_mse: 0.1 + 0.2,
                train_mae: 1e-10,
                test_mse_raw: 2e-3,
                best_test_epoch: 7,
            },
        ];
        let rows = report_rows(&report);
        assert_eq!(rows[0], ["metric", "pre-injection", "1-2 h"]);
        assert_eq!(parse_report_rows(&rows).unwrap(), report);
        assert_eq!(report_rows(&[]), vec![vec!["metric".to_string()]]);
    }
}
