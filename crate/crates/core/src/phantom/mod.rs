//! Synthetic subjects with grade-conditioned tracer kinetics, standing in
//! for a clinical cohort.

mod cohort;
mod geometry;
mod kinetics;
mod render;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use cohort::{
    generate_cohort, grade_counts, load_series, read_manifest, simulate_subject, subject_id, write_cohort,
    write_series, Cohort, CohortSubject, GradeMix, ManifestRecord, SubjectSeries, MANIFEST_FILE,
};
pub use geometry::{Label, Plane, PlaneGeometry, VentricleBounds};
pub use kinetics::{
    simulate_tracer, stability_limit, ConcentrationField, Kinetics, PlaneField, SimulationOptions, TransientReflux,
    AQUEDUCT_RATE, STEP_SAFETY, VENTRICLE_RATE,
};
pub use render::{render_pair, RenderParams, TimePointImage};

/// Scan times in hours: baseline, four early scans, the 24 h target, 48 h
/// and the four-week control.
pub const SCHEDULE: [f64; 8] = [0.0, 1.5, 4.0, 6.0, 8.0, 24.0, 48.0, 696.0];
pub const TARGET_TIME: f64 = 24.0;
/// Share of the injected dose that reaches the intracranial space.
pub const INTRACRANIAL_FRACTION: f64 = 0.25;
pub const SUPPORTED_GRIDS: [usize; 3] = [64, 128, 256];

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("unsupported grid size {0} (expected 64, 128 or 256)")]
    GridSize(usize),
    #[error("invalid grade {0}")]
    Grade(u8),
    #[error("grade {0} needs transient reflux subjects to be enabled")]
    TransientDisabled(u8),
    #[error("invalid grade mix: {0}")]
    Mix(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("time step {step} h exceeds the explicit stability limit {limit} h")]
    Unstable { step: f64, limit: f64 },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("cohort files: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PhantomError> = std::result::Result<T, E>;

/// Uniform sampling interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KineticRanges {
    pub d_parenchyma: Range,
    pub d_sas: f64,
    /// Fraction of the intracranial share that reaches the slice.
    pub amplitude: Range,
    pub rise: Range,
    pub decay: Range,
    pub elimination: Range,
    /// Offset of the inflow direction from straight down, radians.
    pub source_offset: Range,
    pub source_spread: Range,
    /// Reflux coefficient per grade 0..=4; grade 0 must be exactly zero.
    pub reflux: [Range; 5],
    /// Grade 2 only: end of the reflux window and ventricular washout rate.
    pub transient_end: Range,
    pub transient_washout: Range,
}

impl Default for KineticRanges {
    fn default() -> Self {
        Self {
            d_parenchyma: Range::new(0.4, 1.2),
            d_sas: 6.0,
            amplitude: Range::new(0.7, 1.0),
            rise: Range::new(0.5, 0.8),
            decay: Range::new(14.0, 18.0),
            elimination: Range::new(0.025, 0.035),
            source_offset: Range::new(-0.6, 0.6),
            source_spread: Range::new(0.3, 1.2),
            reflux: [
                Range::new(0.0, 0.0),
                Range::new(0.002, 0.004),
                Range::new(0.3, 0.5),
                Range::new(0.05, 0.09),
                Range::new(0.5, 1.0),
            ],
            transient_end: Range::new(6.0, 8.0),
            transient_washout: Range::new(0.4, 0.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub grid: usize,
    pub ventricles: VentricleBounds,
    pub kinetics: KineticRanges,
    pub render: RenderParams,
    /// Allows grades 1 and 2 (transient reflux).
    pub transient_grades: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            ventricles: VentricleBounds::default(),
            kinetics: KineticRanges::default(),
            render: RenderParams::default(),
            transient_grades: false,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_GRIDS.contains(&self.grid) {
            return Err(PhantomError::GridSize(self.grid));
        }
        let r = &self.kinetics.reflux;
        // Grade 2 refluxes only transiently, so its strength is not ordered
        // against the persistent grades.
        let persistent = [r[0], r[1], r[3], r[4]];
        if r[0].lo != 0.0 || r[0].hi != 0.0 || persistent.windows(2).any(|w| w[1].lo <= w[0].hi) || r[2].lo <= 0.0 {
            return Err(PhantomError::Mix(
                "reflux ranges must start at zero for grade 0 and increase strictly over grades 1, 3 and 4".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub seed: u64,
    pub grid: usize,
    /// Indexed by [`Plane::index`].
    pub planes: [PlaneGeometry; 2],
    pub kinetics: Kinetics,
    pub true_grade: u8,
}

impl PhantomSubject {
    pub fn plane(&self, plane: Plane) -> &PlaneGeometry {
        &self.planes[plane.index()]
    }
}

/// Deterministic subject from a seed. Geometry and kinetics draw from
/// separate streams so the anatomy does not depend on the grade.
pub fn generate_subject(id: &str, seed: u64, grade: u8, config: &PhantomConfig) -> Result<PhantomSubject> {
    config.validate()?;
    if grade > 4 {
        return Err(PhantomError::Grade(grade));
    }
    if matches!(grade, 1 | 2) && !config.transient_grades {
        return Err(PhantomError::TransientDisabled(grade));
    }
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    let sagittal = geometry::generate_plane(&mut geo_rng, config.grid, Plane::Sagittal, config.ventricles)?;
    let axial = geometry::generate_plane(&mut geo_rng, config.grid, Plane::Axial, config.ventricles)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b69_6e65_7469_6373);
    let r = &config.kinetics;
    let mut kinetics = Kinetics {
        d_parenchyma: r.d_parenchyma.sample(&mut rng),
        d_sas: r.d_sas,
        dose: INTRACRANIAL_FRACTION * r.amplitude.sample(&mut rng),
        rise: r.rise.sample(&mut rng),
        decay: r.decay.sample(&mut rng),
        elimination: r.elimination.sample(&mut rng),
        source_angle: PI / 2.0 + r.source_offset.sample(&mut rng),
        source_spread: r.source_spread.sample(&mut rng),
        reflux: 0.0,
        transient: None,
    };
    kinetics.reflux = r.reflux[grade as usize].sample(&mut rng);
    if grade == 2 {
        kinetics.transient = Some(TransientReflux {
            end: r.transient_end.sample(&mut rng),
            washout: r.transient_washout.sample(&mut rng),
        });
    }
    Ok(PhantomSubject {
        id: id.to_string(),
        seed,
        grid: config.grid,
        planes: [sagittal, axial],
        kinetics,
        true_grade: grade,
    })
}

/// File-name form of a scan time: `0h`, `1.5h`, `24h`.
pub fn timecode(hours: f64) -> String {
    format!("{hours}h")
}

pub fn parse_timecode(code: &str) -> Option<f64> {
    let v: f64 = code.strip_suffix('h')?.parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v)
}

/// SplitMix64 finalizer; derives independent child seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
