//! Procedural label maps for the sagittal and axial slices.
//!
//! Coordinates are normalized to [-1, 1] on both axes with the row axis
//! pointing down, so "bottom" (the skull base in the sagittal slice, the
//! posterior pole in the axial one) has positive `v`.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{PhantomError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Parenchyma = 1,
    Ventricle = 2,
    /// Third ventricle and aqueduct channel.
    Aqueduct = 3,
    /// Subarachnoid rim and fissures.
    Sas = 4,
    /// Enhancement-free reference tissue.
    Reference = 5,
}

impl Label {
    pub const ALL: [Label; 6] =
        [Label::Background, Label::Parenchyma, Label::Ventricle, Label::Aqueduct, Label::Sas, Label::Reference];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Label> {
        Label::ALL.get(code as usize).copied()
    }

    pub fn is_csf(self) -> bool {
        matches!(self, Label::Ventricle | Label::Aqueduct | Label::Sas)
    }

    /// Cells where the tracer moves by diffusion.
    pub fn diffuses(self) -> bool {
        matches!(self, Label::Parenchyma | Label::Sas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    Sagittal,
    Axial,
}

impl Plane {
    pub const BOTH: [Plane; 2] = [Plane::Sagittal, Plane::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Axial => "axial",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Bounds on the lateral-ventricle area as a fraction of the parenchyma area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VentricleBounds {
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for VentricleBounds {
    fn default() -> Self {
        Self { min_fraction: 0.04, max_fraction: 0.14 }
    }
}

/// Label map of one slice plus the cells that exchange tracer with the aqueduct.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGeometry {
    pub plane: Plane,
    pub n: usize,
    pub labels: Vec<Label>,
    /// Centre of the head outline in normalized coordinates.
    pub center: (f64, f64),
    /// Subarachnoid cells that exchange tracer with the aqueduct. The
    /// subarachnoid space is treated as one reservoir on the exchange
    /// time scale, so this is the whole rim including fissures.
    pub outlet: Vec<usize>,
}

impl PlaneGeometry {
    pub fn mask(&self, label: Label) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Normalized coordinates `(u, v)` of a cell centre.
    pub fn coords(&self, idx: usize) -> (f64, f64) {
        cell_coords(self.n, idx)
    }

    pub fn ventricle_fraction(&self) -> f64 {
        self.count(Label::Ventricle) as f64 / self.count(Label::Parenchyma).max(1) as f64
    }
}

fn cell_coords(n: usize, idx: usize) -> (f64, f64) {
    let (i, j) = (idx / n, idx % n);
    ((j as f64 + 0.5) / n as f64 * 2.0 - 1.0, (i as f64 + 0.5) / n as f64 * 2.0 - 1.0)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    rot: f64,
}

impl Ellipse {
    fn level(&self, u: f64, v: f64) -> f64 {
        let (s, c) = self.rot.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let (x, y) = (c * du + s * dv, -s * du + c * dv);
        (x / self.ax).powi(2) + (y / self.ay).powi(2)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        self.level(u, v) <= 1.0
    }
}

/// Segment from `a` to `b` thickened to `half_width`.
#[derive(Debug, Clone, Copy)]
struct Ribbon {
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
}

impl Ribbon {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = (((u - self.a.0) * dx + (v - self.a.1) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (self.a.0 + t * dx - u, self.a.1 + t * dy - v);
        px * px + py * py <= self.half_width * self.half_width
    }
}

/// Point where the ray from `from` along `dir` leaves the ellipse.
fn exit_point(e: &Ellipse, from: (f64, f64), dir: (f64, f64)) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0, 4.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if e.contains(from.0 + mid * dir.0, from.1 + mid * dir.1) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (from.0 + lo * dir.0, from.1 + lo * dir.1)
}

/// Channel and ventricle width in normalized units; about two cells at grid 64.
const CHANNEL_HALF_WIDTH: f64 = 0.036;
const FISSURE_HALF_WIDTH: f64 = 0.02;
const REFERENCE_RADIUS: f64 = 0.075;
const MAX_ATTEMPTS: usize = 200;

pub(crate) fn generate_plane(
    rng: &mut ChaCha8Rng,
    n: usize,
    plane: Plane,
    bounds: VentricleBounds,
) -> Result<PlaneGeometry> {
    let cx = rng.random_range(-0.03..0.03);
    let cy = rng.random_range(-0.03..0.03);
    let (ax, ay) = match plane {
        Plane::Sagittal => (rng.random_range(0.82..0.88), rng.random_range(0.72..0.8)),
        Plane::Axial => (rng.random_range(0.72..0.8), rng.random_range(0.82..0.88)),
    };
    let rim = rng.random_range(0.075..0.1);
    let outer = Ellipse { cx, cy, ax, ay, rot: 0.0 };
    let inner = Ellipse { cx, cy, ax: ax - rim, ay: ay - rim, rot: 0.0 };

    let fissures: Vec<Ribbon> = (0..rng.random_range(2..=3))
        .map(|_| {
            let phi = rng.random_range(-0.85 * PI..-0.15 * PI);
            let dir = (phi.cos(), phi.sin());
            let start = exit_point(&inner, (cx, cy), dir);
            let len = rng.random_range(0.12..0.26);
            Ribbon { a: start, b: (start.0 - len * dir.0, start.1 - len * dir.1), half_width: FISSURE_HALF_WIDTH }
        })
        .collect();

    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let ref_center = (side * 0.86, -0.86);

    for _ in 0..MAX_ATTEMPTS {
        let (ventricles, third) = sample_ventricles(rng, plane, cx, cy);
        let mouth_dir = {
            let a: f64 = PI / 2.0 + rng.random_range(-0.15..0.15);
            (a.cos(), a.sin())
        };
        let third_c = (third.cx, third.cy);
        let mouth = exit_point(&inner, third_c, mouth_dir);
        let channel = Ribbon {
            a: third_c,
            b: (mouth.0 + 0.5 * rim * mouth_dir.0, mouth.1 + 0.5 * rim * mouth_dir.1),
            half_width: CHANNEL_HALF_WIDTH,
        };

        let mut labels = vec![Label::Background; n * n];
        for (idx, l) in labels.iter_mut().enumerate() {
            let (u, v) = cell_coords(n, idx);
            let dr = ((u - ref_center.0).powi(2) + (v - ref_center.1).powi(2)).sqrt();
            *l = if dr <= REFERENCE_RADIUS {
                Label::Reference
            } else if !outer.contains(u, v) {
                Label::Background
            } else if !inner.contains(u, v) {
                Label::Sas
            } else if ventricles.iter().any(|e| e.contains(u, v)) {
                Label::Ventricle
            } else if third.contains(u, v) || channel.contains(u, v) {
                Label::Aqueduct
            } else if fissures.iter().any(|f| f.contains(u, v)) {
                Label::Sas
            } else {
                Label::Parenchyma
            };
        }
        let geom = PlaneGeometry { plane, n, labels, center: (cx, cy), outlet: Vec::new() };
        let frac = geom.ventricle_fraction();
        if frac < bounds.min_fraction || frac > bounds.max_fraction {
            continue;
        }
        let outlet: Vec<usize> = (0..n * n).filter(|&i| geom.labels[i] == Label::Sas).collect();
        if outlet.is_empty() || geom.count(Label::Aqueduct) == 0 || geom.count(Label::Reference) == 0 {
            continue;
        }
        return Ok(PlaneGeometry { outlet, ..geom });
    }
    Err(PhantomError::Geometry(format!(
        "no {} geometry within ventricle fraction [{}, {}] after {MAX_ATTEMPTS} attempts",
        plane.name(),
        bounds.min_fraction,
        bounds.max_fraction
    )))
}

/// Lateral ventricles plus the third ventricle the aqueduct channel starts from.
fn sample_ventricles(rng: &mut ChaCha8Rng, plane: Plane, cx: f64, cy: f64) -> (Vec<Ellipse>, Ellipse) {
    match plane {
        Plane::Sagittal => {
            let v = Ellipse {
                cx: cx + rng.random_range(-0.08..0.08),
                cy: cy + rng.random_range(-0.14..-0.04),
                ax: rng.random_range(0.2..0.36),
                ay: rng.random_range(0.07..0.14),
                rot: rng.random_range(-0.2..0.2),
            };
            let third = Ellipse {
                cx: v.cx + rng.random_range(-0.05..0.05),
                cy: v.cy + v.ay + 0.07,
                ax: 0.07,
                ay: 0.06,
                rot: 0.0,
            };
            (vec![v], third)
        }
        Plane::Axial => {
            let dx = rng.random_range(0.1..0.15);
            let vcy = cy + rng.random_range(-0.12..0.0);
            let ax = rng.random_range(0.05..0.085);
            let ay = rng.random_range(0.18..0.3);
            let rot = rng.random_range(0.0..0.2);
            let left = Ellipse { cx: cx - dx, cy: vcy, ax, ay, rot };
            let right = Ellipse { cx: cx + dx, cy: vcy, ax, ay, rot: -rot };
            let third = Ellipse { cx, cy: vcy + 0.6 * ay, ax: 0.04, ay: 0.1, rot: 0.0 };
            (vec![left, right], third)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_label_present_and_outlet_is_sas() {
        for plane in Plane::BOTH {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let g = generate_plane(&mut rng, 64, plane, VentricleBounds::default()).unwrap();
            for l in Label::ALL {
                assert!(g.count(l) > 0, "{plane:?} lacks {l:?}");
            }
            assert!(g.outlet.iter().all(|&i| g.labels[i] == Label::Sas));
        }
    }

    #[test]
    fn label_codes_round_trip() {
        for l in Label::ALL {
            assert_eq!(Label::from_code(l.code()), Some(l));
        }
        assert_eq!(Label::from_code(9), None);
    }
}
