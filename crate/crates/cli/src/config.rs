//! Flat `section.key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use tracernet_core::evaluator::GraderConfig;
use tracernet_core::phantom::{timecode, GradeMix, PhantomConfig, SCHEDULE, TARGET_TIME};
use tracernet_core::trainer::{LossKind, TrainConfig};
use tracernet_core::unet::UNetConfig;

use crate::{CliError, Result};

/// A named set of input scan times.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub label: String,
    pub times: Vec<f64>,
}

impl Ablation {
    pub fn new(label: &str, times: &[f64]) -> Self {
        Self { label: label.to_string(), times: times.to_vec() }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.times.len()
    }
}

pub fn default_ablations() -> Vec<Ablation> {
    vec![
        Ablation::new("pre-injection", &[0.0]),
        Ablation::new("1-2h", &[1.5]),
        Ablation::new("3-5h", &[4.0]),
        Ablation::new("5-7h", &[6.0]),
        Ablation::new("7-9h", &[8.0]),
        Ablation::new("1-9h", &[1.5, 4.0, 6.0, 8.0]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSection {
    pub n: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub grade_mix: GradeMix,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub transient_grades: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    /// Checked against each ablation when set; derived from it otherwise.
    pub in_channels: Option<usize>,
    pub base_features: usize,
    /// Derived from the grid size when unset.
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub cohort: CohortSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub grader: GraderConfig,
    pub ablations: Vec<Ablation>,
    pub workspace: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: CohortSection {
                n: 136,
                seed: 0,
                grid_size: 64,
                grade_mix: GradeMix::default(),
                noise_sigma: PhantomConfig::default().render.noise_sigma,
                train_fraction: 105.0 / 136.0,
                transient_grades: false,
            },
            model: ModelSection { in_channels: None, base_features: 16, depth: None },
            training: TrainConfig::default(),
            grader: GraderConfig::default(),
            ablations: default_ablations(),
            workspace: PathBuf::from("workspace"),
        }
    }
}

/// Key, description. Every key is rendered by [`ExperimentConfig::to_text`].
pub const KEYS: [(&str, &str); 20] = [
    ("cohort.n", "number of phantom subjects"),
    ("cohort.seed", "cohort generation and train/test split seed"),
    ("cohort.grid_size", "slice extent in pixels: 64, 128 or 256"),
    ("cohort.grade_mix", "grade:fraction pairs"),
    ("cohort.noise_sigma", "additive noise standard deviation"),
    ("cohort.train_fraction", "share of subjects in the training split"),
    ("cohort.transient_grades", "allow grades 1 and 2"),
    ("model.in_channels", "auto (two per input time) or a fixed count"),
    ("model.base_features", "first-level width"),
    ("model.depth", "pooling levels; auto picks log2(grid / 16)"),
    ("training.loss_kind", "l1 or l2"),
    ("training.epochs", "passes over the training split"),
    ("training.batch_size", "samples per optimizer step"),
    ("training.learning_rate", "Adam step size"),
    ("training.seed", "weight initialization and shuffling seed"),
    ("training.log_every", "epochs between loss-curve records"),
    ("grader.enhancement_threshold", "minimum ventricle intensity rise over baseline"),
    ("grader.isointensity_ratio", "ventricle/subarachnoid enhancement ratio for grade 4"),
    ("paths.workspace", "root directory for all artifacts"),
    ("ablation.<label>", "comma-separated input scan times in hours; replaces the default set"),
];

fn err(line: usize, key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { line, key: key.to_string(), message: message.into() }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid {}", std::any::type_name::<T>()))
}

fn parse_positive(v: &str) -> std::result::Result<usize, String> {
    match parse_num::<usize>(v)? {
        0 => Err("must be positive".into()),
        n => Ok(n),
    }
}

fn parse_auto(v: &str) -> std::result::Result<Option<usize>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_positive(v).map(Some)
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn parse_unit(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(format!("{x} is outside (0, 1)"))
    }
}

fn parse_nonneg(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("{x} must be finite and non-negative"))
    }
}

pub fn parse_grade_mix(v: &str) -> std::result::Result<GradeMix, String> {
    let pairs = v
        .split(',')
        .map(|item| {
            let (g, f) = item.split_once(':').ok_or_else(|| format!("`{item}` is not grade:fraction"))?;
            Ok((parse_num::<u8>(g.trim())?, parse_num::<f64>(f.trim())?))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    let mix = GradeMix(pairs);
    mix.validate().map_err(|e| e.to_string())?;
    Ok(mix)
}

fn format_grade_mix(mix: &GradeMix) -> String {
    mix.0.iter().map(|(g, f)| format!("{g}:{f:?}")).collect::<Vec<_>>().join(",")
}

fn parse_times(v: &str) -> std::result::Result<Vec<f64>, String> {
    let mut times = v
        .split(',')
        .map(|t| {
            let t: f64 = parse_num(t.trim())?;
            if !SCHEDULE.contains(&t) || t == TARGET_TIME {
                return Err(format!("{t} h is not an input scan time (schedule {SCHEDULE:?} without {TARGET_TIME} h)"));
            }
            Ok(t)
        })
        .collect::<std::result::Result<Vec<f64>, String>>()?;
    times.sort_by(f64::total_cmp);
    times.dedup();
    Ok(times)
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && !label.starts_with('.')
        && label.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Parses `key = value` lines; `#` starts a comment and values may be
/// double-quoted. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut ablations: Vec<Ablation> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, content, "expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim();
        let value = value.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(value);
        if seen.iter().any(|k| k == key) {
            return Err(err(line, key, "duplicate key"));
        }
        seen.push(key.to_string());
        let apply = |cfg: &mut ExperimentConfig| -> std::result::Result<(), String> {
            match key {
                "cohort.n" => cfg.cohort.n = parse_positive(value)?,
                "cohort.seed" => cfg.cohort.seed = parse_num(value)?,
                "cohort.grid_size" => cfg.cohort.grid_size = parse_num(value)?,
                "cohort.grade_mix" => cfg.cohort.grade_mix = parse_grade_mix(value)?,
                "cohort.noise_sigma" => cfg.cohort.noise_sigma = parse_nonneg(value)?,
                "cohort.train_fraction" => cfg.cohort.train_fraction = parse_unit(value)?,
                "cohort.transient_grades" => cfg.cohort.transient_grades = parse_bool(value)?,
                "model.in_channels" => cfg.model.in_channels = parse_auto(value)?,
                "model.base_features" => cfg.model.base_features = parse_positive(value)?,
                "model.depth" => cfg.model.depth = parse_auto(value)?,
                "training.loss_kind" => cfg.training.loss = value.parse::<LossKind>()?,
                "training.epochs" => cfg.training.epochs = parse_positive(value)?,
                "training.batch_size" => cfg.training.batch_size = parse_positive(value)?,
                "training.learning_rate" => {
                    let lr = parse_nonneg(value)?;
                    if lr == 0.0 {
                        return Err("must be positive".into());
                    }
                    cfg.training.learning_rate = lr;
                }
                "training.seed" => cfg.training.seed = parse_num(value)?,
                "training.log_every" => cfg.training.log_every = parse_positive(value)?,
                "grader.enhancement_threshold" => cfg.grader.enhancement_threshold = parse_nonneg(value)?,
                "grader.isointensity_ratio" => cfg.grader.isointensity_ratio = parse_nonneg(value)?,
                "paths.workspace" => {
                    if value.is_empty() {
                        return Err("must not be empty".into());
                    }
                    cfg.workspace = PathBuf::from(value);
                }
                _ => return Err("unknown key".into()),
            }
            Ok(())
        };
        if let Some(label) = key.strip_prefix("ablation.") {
            if !valid_label(label) {
                return Err(err(line, key, "labels use letters, digits, `-`, `_` and `.` only"));
            }
            let times = parse_times(value).map_err(|m| err(line, key, m))?;
            ablations.push(Ablation { label: label.to_string(), times });
        } else {
            apply(&mut cfg).map_err(|m| err(line, key, m))?;
        }
    }
    if !ablations.is_empty() {
        cfg.ablations = ablations;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Cross-key checks that no single line can decide.
    pub fn validate(&self) -> Result<()> {
        let whole = |key: &str, m: String| err(0, key, m);
        self.phantom().validate().map_err(|e| whole("cohort.grid_size", e.to_string()))?;
        if self.cohort.grade_mix.0.iter().any(|&(g, f)| (g == 1 || g == 2) && f > 0.0) && !self.cohort.transient_grades {
            return Err(whole("cohort.grade_mix", "grades 1 and 2 need cohort.transient_grades = true".into()));
        }
        for a in &self.ablations {
            self.unet_config(a, 0).map_err(|e| whole("model.in_channels", e.to_string()))?;
        }
        Ok(())
    }

    pub fn phantom(&self) -> PhantomConfig {
        let base = PhantomConfig::default();
        PhantomConfig {
            grid: self.cohort.grid_size,
            render: tracernet_core::phantom::RenderParams { noise_sigma: self.cohort.noise_sigma, ..base.render },
            transient_grades: self.cohort.transient_grades,
            ..base
        }
    }

    pub fn depth(&self) -> usize {
        self.model.depth.unwrap_or_else(|| (self.cohort.grid_size / 16).max(2).ilog2() as usize)
    }

    pub fn unet_config(&self, ablation: &Ablation, seed: u64) -> Result<UNetConfig> {
        let in_channels = ablation.in_channels();
        if let Some(c) = self.model.in_channels {
            if c != in_channels {
                return Err(CliError::Usage(format!(
                    "model.in_channels = {c} but ablation `{}` supplies {in_channels} channels",
                    ablation.label
                )));
            }
        }
        let cfg = UNetConfig {
            in_channels,
            out_channels: 2,
            base_features: self.model.base_features,
            depth: self.depth(),
            seed,
        };
        cfg.validate()?;
        cfg.check_extent(self.cohort.grid_size, self.cohort.grid_size)?;
        Ok(cfg)
    }

    pub fn ablation(&self, label: &str) -> Result<&Ablation> {
        self.ablations.iter().find(|a| a.label == label).ok_or_else(|| {
            let known: Vec<&str> = self.ablations.iter().map(|a| a.label.as_str()).collect();
            CliError::Usage(format!("unknown ablation `{label}` (configured: {})", known.join(", ")))
        })
    }

    /// The selected ablation, or all of them.
    pub fn selected(&self, label: Option<&str>) -> Result<Vec<&Ablation>> {
        match label {
            Some(l) => Ok(vec![self.ablation(l)?]),
            None => Ok(self.ablations.iter().collect()),
        }
    }

    /// Every key with its resolved value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let c = &self.cohort;
        let auto = |v: Option<usize>| v.map_or("auto".to_string(), |n| n.to_string());
        let values: [String; 19] = [
            c.n.to_string(),
            c.seed.to_string(),
            c.grid_size.to_string(),
            format_grade_mix(&c.grade_mix),
            format!("{:?}", c.noise_sigma),
            format!("{:?}", c.train_fraction),
            c.transient_grades.to_string(),
            auto(self.model.in_channels),
            self.model.base_features.to_string(),
            auto(self.model.depth),
            self.training.loss.to_string(),
            self.training.epochs.to_string(),
            self.training.batch_size.to_string(),
            format!("{:?}", self.training.learning_rate),
            self.training.seed.to_string(),
            self.training.log_every.to_string(),
            format!("{:?}", self.grader.enhancement_threshold),
            format!("{:?}", self.grader.isointensity_ratio),
            format!("\"{}\"", self.workspace.display()),
        ];
        let mut out = String::new();
        for ((key, doc), value) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "# {doc}\n{key} = {value}");
        }
        let _ = writeln!(out, "# {}", KEYS[19].1);
        for a in &self.ablations {
            let times: Vec<String> = a.times.iter().map(|t| format!("{t:?}")).collect();
            let _ = writeln!(out, "ablation.{} = {}", a.label, times.join(","));
        }
        out
    }

    /// Resolved lines of the given sections, plus one ablation if named.
    pub fn fingerprint(&self, sections: &[&str], ablation: Option<&Ablation>) -> String {
        let mut out: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with('#') && sections.iter().any(|s| l.starts_with(&format!("{s}."))))
            .map(|l| format!("{l}\n"))
            .collect();
        if let Some(a) = ablation {
            let codes: Vec<String> = a.times.iter().map(|&t| timecode(t)).collect();
            let _ = writeln!(out, "ablation.{} = {}", a.label, codes.join(","));
        }
        out
    }
}
