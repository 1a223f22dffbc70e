//! Cohorts of phantom subjects with full rendered time series, and their
//! on-disk layout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::geometry::{Label, Plane};
use super::kinetics::{simulate_tracer, SimulationOptions};
use super::render::{render_pair, TimePointImage};
use super::{
    generate_subject, mix_seed, parse_timecode, timecode, PhantomConfig, PhantomError, PhantomSubject, Result,
    SCHEDULE,
};
use crate::tensor::{read_glt, write_glt, Tensor};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tseed\tgrade\tgrid\tfiles";

/// Grade proportions, e.g. `[(0, 0.25), (3, 0.5), (4, 0.25)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeMix(pub Vec<(u8, f64)>);

impl Default for GradeMix {
    fn default() -> Self {
        GradeMix(vec![(0, 0.25), (3, 0.5), (4, 0.25)])
    }
}

impl GradeMix {
    pub fn validate(&self) -> Result<()> {
        let entries = &self.0;
        if entries.is_empty() {
            return Err(PhantomError::Mix("empty".into()));
        }
        for (i, &(g, p)) in entries.iter().enumerate() {
            if g > 4 {
                return Err(PhantomError::Mix(format!("grade {g} outside 0..=4")));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(PhantomError::Mix(format!("proportion {p} for grade {g}")));
            }
            if entries[..i].iter().any(|e| e.0 == g) {
                return Err(PhantomError::Mix(format!("grade {g} listed twice")));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PhantomError::Mix(format!("proportions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` subjects; ties go to the entry
/// listed first.
pub fn grade_counts(n: usize, mix: &GradeMix) -> Result<Vec<(u8, usize)>> {
    mix.validate()?;
    let quotas: Vec<f64> = mix.0.iter().map(|e| e.1 * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(mix.0.iter().map(|e| e.0).zip(counts).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSubject {
    pub subject: PhantomSubject,
    /// One rendered pair per scheduled time.
    pub images: Vec<TimePointImage>,
    /// Tracer share of the dose inside each slice per scheduled time.
    pub masses: Vec<[f64; 2]>,
}

impl CohortSubject {
    pub fn series(&self) -> SubjectSeries {
        let s = &self.subject;
        SubjectSeries {
            id: s.id.clone(),
            seed: s.seed,
            grade: s.true_grade,
            n: s.grid,
            labels: [s.planes[0].labels.clone(), s.planes[1].labels.clone()],
            images: self.images.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub seed: u64,
    pub subjects: Vec<CohortSubject>,
}

/// Rendered time series and label maps of one subject, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub id: String,
    pub seed: u64,
    pub grade: u8,
    pub n: usize,
    /// Indexed by [`Plane::index`].
    pub labels: [Vec<Label>; 2],
    pub images: Vec<TimePointImage>,
}

impl SubjectSeries {
    pub fn image_at(&self, time: f64) -> Option<&TimePointImage> {
        self.images.iter().find(|im| im.time == time)
    }

    pub fn mask(&self, plane: Plane, label: Label) -> Vec<bool> {
        self.labels[plane.index()].iter().map(|&l| l == label).collect()
    }
}

pub fn subject_id(index: usize) -> String {
    format!("s{index:03}")
}

/// Simulates and renders one subject over the full schedule.
pub fn simulate_subject(id: &str, seed: u64, grade: u8, config: &PhantomConfig) -> Result<CohortSubject> {
    let subject = generate_subject(id, seed, grade, config)?;
    let fields = simulate_tracer(&subject, &SCHEDULE, SimulationOptions::default())?;
    let images = fields
        .iter()
        .enumerate()
        .map(|(k, f)| render_pair(&subject, f, &config.render, mix_seed(seed, 1000 + k as u64)))
        .collect();
    let masses = fields.iter().map(|f| [f.planes[0].mass, f.planes[1].mass]).collect();
    Ok(CohortSubject { subject, images, masses })
}

/// `n` subjects with grades apportioned from `mix` and assigned in an
/// order shuffled by `seed`.
pub fn generate_cohort(n: usize, seed: u64, mix: &GradeMix, config: &PhantomConfig) -> Result<Cohort> {
    config.validate()?;
    let mut grades: Vec<u8> = grade_counts(n, mix)?
        .into_iter()
        .flat_map(|(g, c)| std::iter::repeat_n(g, c))
        .collect();
    if grades.iter().any(|g| matches!(g, 1 | 2)) && !config.transient_grades {
        return Err(PhantomError::Mix("grades 1 and 2 need transient reflux subjects to be enabled".into()));
    }
    grades.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let subjects = grades
        .iter()
        .enumerate()
        .map(|(i, &g)| simulate_subject(&subject_id(i), mix_seed(seed, i as u64), g, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { seed, subjects })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub grade: u8,
    pub grid: usize,
    /// Paths relative to the cohort directory.
    pub files: Vec<String>,
}

fn image_path(id: &str, plane: Plane, time: f64) -> String {
    format!("{id}/{}_{}.glt", plane.name(), timecode(time))
}

fn label_path(id: &str, plane: Plane) -> String {
    format!("{id}/labels_{}.glt", plane.name())
}

/// Writes every subject's images and label maps plus the manifest under `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<Vec<ManifestRecord>> {
    let records = cohort
        .subjects
        .iter()
        .map(|cs| write_series(&cs.series(), dir))
        .collect::<Result<Vec<_>>>()?;
    let file = fs::File::create(dir.join(MANIFEST_FILE))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MANIFEST_HEADER}")?;
    for r in &records {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", r.id, r.seed, r.grade, r.grid, r.files.join(","))?;
    }
    w.flush()?;
    Ok(records)
}

pub fn write_series(series: &SubjectSeries, dir: &Path) -> Result<ManifestRecord> {
    let id = &series.id;
    fs::create_dir_all(dir.join(id))?;
    let n = series.n;
    let mut files = Vec::new();
    for plane in Plane::BOTH {
        let rel = label_path(id, plane);
        let codes = Tensor::<f32>::from_fn(&[n, n], |i| series.labels[plane.index()][i].code() as f32);
        write_glt(dir.join(&rel), &codes)?;
        files.push(rel);
    }
    for im in &series.images {
        for plane in Plane::BOTH {
            let rel = image_path(id, plane, im.time);
            write_glt(dir.join(&rel), im.plane(plane))?;
            files.push(rel);
        }
    }
    Ok(ManifestRecord { id: id.clone(), seed: series.seed, grade: series.grade, grid: n, files })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| PhantomError::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(PhantomError::Manifest(format!("{} lacks the expected header", path.display()))),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, line)| {
            let bad = |what: &str| PhantomError::Manifest(format!("line {}: {what}", no + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 tab-separated columns"));
            }
            Ok(ManifestRecord {
                id: cols[0].to_string(),
                seed: cols[1].parse().map_err(|_| bad("bad seed"))?,
                grade: cols[2].parse().ok().filter(|g| *g <= 4).ok_or_else(|| bad("bad grade"))?,
                grid: cols[3].parse().map_err(|_| bad("bad grid"))?,
                files: cols[4].split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            })
        })
        .collect()
}

/// Loads a subject's label maps and every listed time point.
pub fn load_series(dir: &Path, record: &ManifestRecord) -> Result<SubjectSeries> {
    let n = record.grid;
    let read_plane = |rel: &str| -> Result<Tensor<f32>> {
        let t: Tensor<f32> = read_glt(dir.join(rel))?;
        if t.shape() != [n, n] {
            return Err(PhantomError::Manifest(format!("{rel} has shape {:?}, expected [{n}, {n}]", t.shape())));
        }
        Ok(t)
    };
    let mut labels: [Vec<Label>; 2] = [Vec::new(), Vec::new()];
    for plane in Plane::BOTH {
        let t = read_plane(&label_path(&record.id, plane))?;
        labels[plane.index()] = t
            .data()
            .iter()
            .map(|&v| Label::from_code(v as u8).filter(|l| l.code() as f32 == v))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| PhantomError::Manifest(format!("{}: invalid label code", record.id)))?;
    }
    let mut times: Vec<f64> = Vec::new();
    let prefix = format!("{}/{}_", record.id, Plane::Sagittal.name());
    for f in &record.files {
        if let Some(code) = f.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".glt")) {
            let t = parse_timecode(code)
                .ok_or_else(|| PhantomError::Manifest(format!("{f}: unreadable time code")))?;
            times.push(t);
        }
    }
    times.sort_by(f64::total_cmp);
    let images = times
        .iter()
        .map(|&t| {
            Ok(TimePointImage {
                time: t,
                planes: [
                    read_plane(&image_path(&record.id, Plane::Sagittal, t))?,
                    read_plane(&image_path(&record.id, Plane::Axial, t))?,
                ],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectSeries { id: record.id.clone(), seed: record.seed, grade: record.grade, n, labels, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_forced_counts() {
        let mix = GradeMix(vec![(0, 0.2), (3, 0.5), (4, 0.3)]);
        assert_eq!(grade_counts(10, &mix).unwrap(), vec![(0, 2), (3, 5), (4, 3)]);
        let counts = grade_counts(7, &GradeMix::default()).unwrap();
        assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), 7);
        assert_eq!(counts, vec![(0, 2), (3, 3), (4, 2)]);
    }

    #[test]
    fn invalid_mixes() {
        assert!(grade_counts(4, &GradeMix(vec![(0, 0.5), (3, 0.4)])).is_err());
        assert!(grade_counts(4, &GradeMix(vec![(0, 0.5), (0, 0.5)])).is_err());
        assert!(grade_counts(4, &GradeMix(vec![(7, 1.0)])).is_err());
        assert!(grade_counts(4, &GradeMix(vec![])).is_err());
        let config = PhantomConfig::default();
        assert!(generate_cohort(2, 1, &GradeMix(vec![(2, 1.0)]), &config).is_err());
    }
}
