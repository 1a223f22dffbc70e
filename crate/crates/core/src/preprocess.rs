//! Intensity normalization, sample assembly and the train/test split.
//!
//! Every slice is divided by the mean of its reference region and then
//! min-max scaled on its own, inputs and targets alike.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::phantom::{parse_timecode, timecode, Label, Plane, SubjectSeries};
use crate::tensor::{read_glt, write_glt, Tensor, TensorError};

/// Smallest reference mean accepted as a divisor.
pub const MIN_REFERENCE_MEAN: f64 = 1e-9;
pub const DATASET_MANIFEST: &str = "dataset.tsv";
const DATASET_HEADER: &str = "subject_id\tsplit\tinput_times\tinput_file\ttarget_file";

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("reference mask is empty")]
    EmptyMask,
    #[error("reference mean {0} is too close to zero")]
    ZeroReference(f64),
    #[error("subject {subject} lacks time points {missing:?}")]
    MissingTime { subject: String, missing: Vec<String> },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Divides every pixel by the mean over `mask`.
pub fn normalize_reference(image: &Tensor<f32>, mask: &[bool]) -> Result<Tensor<f32>> {
    if mask.len() != image.len() {
        return Err(TensorError::Shape(format!("mask has {} cells, image {}", mask.len(), image.len())).into());
    }
    let (sum, count) = image
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, c), (&v, _)| (s + v as f64, c + 1));
    if count == 0 {
        return Err(PreprocessError::EmptyMask);
    }
    let mean = sum / count as f64;
    if mean.abs() < MIN_REFERENCE_MEAN {
        return Err(PreprocessError::ZeroReference(mean));
    }
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v as f64 / mean) as f32);
    Ok(out)
}

/// `(v - min) / (max - min)`; a constant slice maps to zeros.
pub fn minmax_slice(image: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = image.clone();
    let span = hi as f64 - lo as f64;
    out.data_mut().iter_mut().for_each(|v| {
        *v = if span > 0.0 { ((*v as f64 - lo as f64) / span).clamp(0.0, 1.0) as f32 } else { 0.0 };
    });
    out
}

/// Reference division followed by min-max scaling.
pub fn normalize_slice(image: &Tensor<f32>, reference: &[bool]) -> Result<Tensor<f32>> {
    Ok(minmax_slice(&normalize_reference(image, reference)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    /// `[2T, H, W]`: sagittal then axial for each input time, chronologically.
    pub input: Tensor<f32>,
    /// `[2, H, W]` pair at the target time.
    pub target: Tensor<f32>,
    pub input_times: Vec<f64>,
}

/// Both slices of one time point, normalized, as `[2, H, W]` channel data.
pub fn normalized_pair(series: &SubjectSeries, time: f64) -> Result<Vec<f32>> {
    let image = series.image_at(time).ok_or_else(|| PreprocessError::MissingTime {
        subject: series.id.clone(),
        missing: vec![timecode(time)],
    })?;
    let mut out = Vec::with_capacity(2 * series.n * series.n);
    for plane in Plane::BOTH {
        let reference = series.mask(plane, Label::Reference);
        out.extend_from_slice(normalize_slice(image.plane(plane), &reference)?.data());
    }
    Ok(out)
}

pub fn assemble_sample(series: &SubjectSeries, input_times: &[f64], target_time: f64) -> Result<Sample> {
    let mut times = input_times.to_vec();
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.is_empty() {
        return Err(PreprocessError::Dataset("no input times selected".into()));
    }
    let missing: Vec<String> = times
        .iter()
        .chain(std::iter::once(&target_time))
        .filter(|&&t| series.image_at(t).is_none())
        .map(|&t| timecode(t))
        .collect();
    if !missing.is_empty() {
        return Err(PreprocessError::MissingTime { subject: series.id.clone(), missing });
    }
    let n = series.n;
    let mut input = Vec::with_capacity(2 * times.len() * n * n);
    for &t in &times {
        input.extend(normalized_pair(series, t)?);
    }
    Ok(Sample {
        subject_id: series.id.clone(),
        input: Tensor::new(vec![2 * times.len(), n, n], input)?,
        target: Tensor::new(vec![2, n, n], normalized_pair(series, target_time)?)?,
        input_times: times,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Shuffles with `seed` and puts `round(fraction * n)` items in the
/// training part.
pub fn split_cohort<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PreprocessError::Split(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = items.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(PreprocessError::Split(format!("{n} subjects at fraction {train_fraction} leave a split empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = order.split_at(n_train);
    Ok((a.iter().map(|&i| items[i].clone()).collect(), b.iter().map(|&i| items[i].clone()).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks unique subjects and a common input layout.
    pub fn new(split: Split, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(PreprocessError::Dataset(format!("subject {} appears twice", s.subject_id)));
            }
            let first = &samples[0];
            if s.input.shape() != first.input.shape() || s.target.shape() != first.target.shape() {
                return Err(PreprocessError::Dataset(format!(
                    "subject {} has input {:?}, expected {:?}",
                    s.subject_id,
                    s.input.shape(),
                    first.input.shape()
                )));
            }
        }
        Ok(Self { split, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.input.shape()[0])
    }

    /// Stacks the selected samples into `[B, C, H, W]` inputs and targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let inputs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].input).collect();
        let targets: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].target).collect();
        Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
    }
}

fn times_code(times: &[f64]) -> String {
    times.iter().map(|&t| timecode(t)).collect::<Vec<_>>().join(",")
}

/// Writes samples as GLT files plus a manifest listing subject, split,
/// input times and file paths.
pub fn write_datasets(dir: &Path, datasets: &[&Dataset]) -> Result<()> {
    let mut rows = Vec::new();
    for ds in datasets {
        let sub = dir.join(ds.split.name());
        fs::create_dir_all(&sub)?;
        for s in &ds.samples {
            let input = format!("{}/{}_input.glt", ds.split.name(), s.subject_id);
            let target = format!("{}/{}_target.glt", ds.split.name(), s.subject_id);
            write_glt(dir.join(&input), &s.input)?;
            write_glt(dir.join(&target), &s.target)?;
            rows.push(format!(
                "{}\t{}\t{}\t{input}\t{target}",
                s.subject_id,
                ds.split.name(),
                times_code(&s.input_times)
            ));
        }
    }
    let mut w = BufWriter::new(fs::File::create(dir.join(DATASET_MANIFEST))?);
    writeln!(w, "{DATASET_HEADER}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the train and test datasets written by [`write_datasets`].
pub fn read_datasets(dir: &Path) -> Result<(Dataset, Dataset)> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| PreprocessError::Dataset(format!("missing dataset manifest {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|l| l.1) != Some(DATASET_HEADER) {
        return Err(PreprocessError::Dataset(format!("{} lacks the expected header", path.display())));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (no, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| PreprocessError::Dataset(format!("{} line {}: {what}", path.display(), no + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        let split = Split::parse(cols[1]).ok_or_else(|| bad("unknown split"))?;
        let input_times = cols[2]
            .split(',')
            .map(parse_timecode)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("bad time code"))?;
        let sample = Sample {
            subject_id: cols[0].to_string(),
            input: read_glt(dir.join(cols[3]))?,
            target: read_glt(dir.join(cols[4]))?,
            input_times,
        };
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    let train = Dataset::new(Split::Train, train)?;
    let test = Dataset::new(Split::Test, test)?;
    let ids: HashSet<&str> = train.samples.iter().map(|s| s.subject_id.as_str()).collect();
    if let Some(s) = test.samples.iter().find(|s| ids.contains(s.subject_id.as_str())) {
        return Err(PreprocessError::Dataset(format!("subject {} is in both splits", s.subject_id)));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f32>) -> Tensor<f32> {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn reference_division() {
        let out = normalize_reference(&t(vec![4.0; 6]), &[true, true, false, false, false, false]).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
        assert!(matches!(normalize_reference(&t(vec![0.0; 3]), &[true; 3]), Err(PreprocessError::ZeroReference(_))));
        assert!(matches!(normalize_reference(&t(vec![1.0; 3]), &[false; 3]), Err(PreprocessError::EmptyMask)));
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_slice(&t(vec![2.0, 4.0])).data(), &[0.0, 1.0]);
        assert_eq!(minmax_slice(&t(vec![3.0; 4])).data(), &[0.0; 4]);
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<usize> = (0..136).collect();
        let (a, b) = split_cohort(&ids, 105.0 / 136.0, 5).unwrap();
        assert_eq!((a.len(), b.len()), (105, 31));
        assert!(a.iter().all(|x| !b.contains(x)));
        assert_eq!(split_cohort(&ids, 105.0 / 136.0, 5).unwrap(), (a, b));
        assert!(split_cohort(&ids[..1], 0.5, 1).is_err());
        assert!(split_cohort(&ids, 1.0, 1).is_err());
    }
}
