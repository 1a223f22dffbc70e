//! Tracer transport: explicit finite-volume diffusion over subarachnoid and
//! parenchymal cells, a time-varying inflow along the subarachnoid rim,
//! first-order elimination everywhere, and reflux from the subarachnoid
//! space through the aqueduct into the lateral ventricles. The aqueduct and
//! the ventricles are treated as well-mixed compartments.
//!
//! Concentrations are mass per unit normalized area, so a cell holds
//! `c * 4 / n^2` of the injected dose.

use super::geometry::{Label, PlaneGeometry};
use super::{PhantomError, PhantomSubject, Result};

/// Sampled kinetic parameters of one subject. Diffusivities are in grid
/// cells squared per hour at grid 64 and are rescaled for finer grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinetics {
    pub d_parenchyma: f64,
    pub d_sas: f64,
    /// Intracranial share of the injected dose that reaches this slice.
    pub dose: f64,
    /// Inflow rise and decay time constants (hours).
    pub rise: f64,
    pub decay: f64,
    /// First-order elimination rate (1/hour).
    pub elimination: f64,
    /// Direction (radians, row axis down) and concentration of the rim inflow.
    pub source_angle: f64,
    pub source_spread: f64,
    /// Reflux coefficient scaling the aqueduct and ventricle exchange
    /// rates; zero means no reflux.
    pub reflux: f64,
    /// Transient reflux: exchange stops at `end` hours, then the
    /// ventricles drain back at `washout` per hour.
    pub transient: Option<TransientReflux>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientReflux {
    pub end: f64,
    pub washout: f64,
}

/// Relaxation rates (1/hour) of the aqueduct towards the outlet zone and
/// of the ventricles towards the aqueduct, per unit reflux coefficient.
pub const AQUEDUCT_RATE: f64 = 20.0;
pub const VENTRICLE_RATE: f64 = 1.0;
/// Fraction of the stability limit used when no step is given.
pub const STEP_SAFETY: f64 = 0.9;

impl Kinetics {
    /// Unnormalized inflow rate `(1 - exp(-t/rise)) exp(-t/decay)`.
    fn rate_integral(&self, t: f64) -> f64 {
        let fast = 1.0 / (1.0 / self.rise + 1.0 / self.decay);
        self.decay * (1.0 - (-t / self.decay).exp()) - fast * (1.0 - (-t / fast).exp())
    }

    /// Fraction of the dose that has entered by time `t`.
    pub fn cumulative_inflow(&self, t: f64) -> f64 {
        let total = self.decay - 1.0 / (1.0 / self.rise + 1.0 / self.decay);
        (self.rate_integral(t.max(0.0)) / total).min(1.0)
    }
}

/// Tracer state of one slice at a scheduled time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneField {
    /// Per-cell concentration, compartments painted onto their masks.
    pub concentration: Vec<f64>,
    pub aqueduct: f64,
    pub ventricles: f64,
    /// Share of the injected dose inside the slice.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationField {
    pub time: f64,
    pub planes: [PlaneField; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimulationOptions {
    /// Explicit time step in hours. Must respect the stability bound.
    pub step: Option<f64>,
}

/// Largest stable explicit step for the given cell diffusivities.
pub fn stability_limit(d_max: f64) -> f64 {
    1.0 / (4.0 * d_max)
}

/// Working state on a grid padded by one inert cell on every side, so the
/// stencil needs no boundary branches.
struct PlaneState<'a> {
    geom: &'a PlaneGeometry,
    /// Padded row length.
    m: usize,
    c: Vec<f64>,
    next: Vec<f64>,
    /// Face diffusivities towards the east and south neighbour.
    d_east: Vec<f64>,
    d_south: Vec<f64>,
    /// Inflow share per padded cell, summing to one.
    source: Vec<(usize, f64)>,
    outlet: Vec<usize>,
    aqueduct: f64,
    ventricles: f64,
    n_aqueduct: f64,
    n_ventricles: f64,
    cell_area: f64,
}

impl<'a> PlaneState<'a> {
    fn new(geom: &'a PlaneGeometry, k: &Kinetics, d_par: f64, d_sas: f64) -> Self {
        let n = geom.n;
        let m = n + 2;
        let pad = |idx: usize| (idx / n + 1) * m + idx % n + 1;
        let mut d_cell = vec![0.0; m * m];
        for (idx, l) in geom.labels.iter().enumerate() {
            d_cell[pad(idx)] = match l {
                Label::Sas => d_sas,
                Label::Parenchyma => d_par,
                _ => 0.0,
            };
        }
        let harmonic = |a: f64, b: f64| if a > 0.0 && b > 0.0 { 2.0 * a * b / (a + b) } else { 0.0 };
        let mut d_east = vec![0.0; m * m];
        let mut d_south = vec![0.0; m * m];
        for idx in 0..m * (m - 1) {
            d_east[idx] = harmonic(d_cell[idx], d_cell[idx + 1]);
            d_south[idx] = harmonic(d_cell[idx], d_cell[idx + m]);
        }
        let (cx, cy) = geom.center;
        let mut source: Vec<(usize, f64)> = (0..n * n)
            .filter(|&i| geom.labels[i] == Label::Sas)
            .map(|i| {
                let (u, v) = geom.coords(i);
                let theta = (v - cy).atan2(u - cx);
                (pad(i), (k.source_spread * (theta - k.source_angle).cos()).exp())
            })
            .collect();
        let total: f64 = source.iter().map(|s| s.1).sum();
        source.iter_mut().for_each(|s| s.1 /= total);
        Self {
            geom,
            m,
            c: vec![0.0; m * m],
            next: vec![0.0; m * m],
            d_east,
            d_south,
            source,
            outlet: geom.outlet.iter().map(|&i| pad(i)).collect(),
            aqueduct: 0.0,
            ventricles: 0.0,
            n_aqueduct: geom.count(Label::Aqueduct) as f64,
            n_ventricles: geom.count(Label::Ventricle) as f64,
            cell_area: 4.0 / (n * n) as f64,
        }
    }

    fn diffuse(&mut self, h: f64) {
        let m = self.m;
        let (c, de, ds) = (&self.c, &self.d_east, &self.d_south);
        for idx in m..m * (m - 1) {
            let flux = de[idx] * (c[idx + 1] - c[idx]) - de[idx - 1] * (c[idx] - c[idx - 1])
                + ds[idx] * (c[idx + m] - c[idx])
                - ds[idx - m] * (c[idx] - c[idx - m]);
            self.next[idx] = c[idx] + h * flux;
        }
        std::mem::swap(&mut self.c, &mut self.next);
    }

    fn inflow(&mut self, dose: f64) {
        let per_cell = dose / self.cell_area;
        for &(i, w) in &self.source {
            self.c[i] += per_cell * w;
        }
    }

    /// Moves tracer between the outlet zone and the aqueduct, and between
    /// the aqueduct and the ventricles, by exact two-pool equilibration.
    fn exchange(&mut self, h: f64, g_outlet: f64, g_ventricles: f64, washout: f64) {
        let n_outlet = self.outlet.len() as f64;
        if g_outlet > 0.0 {
            let c_out = self.outlet.iter().map(|&i| self.c[i]).sum::<f64>() / n_outlet;
            let inv = 1.0 / n_outlet + 1.0 / self.n_aqueduct;
            let q = (c_out - self.aqueduct) * (1.0 - (-g_outlet * inv * h).exp()) / inv;
            if q > 0.0 {
                let keep = 1.0 - q / (c_out * n_outlet);
                for &i in &self.outlet {
                    self.c[i] *= keep;
                }
            } else {
                for &i in &self.outlet {
                    self.c[i] -= q / n_outlet;
                }
            }
            self.aqueduct += q / self.n_aqueduct;
        }
        if g_ventricles > 0.0 {
            let inv = 1.0 / self.n_aqueduct + 1.0 / self.n_ventricles;
            let q = (self.aqueduct - self.ventricles) * (1.0 - (-g_ventricles * inv * h).exp()) / inv;
            self.aqueduct -= q / self.n_aqueduct;
            self.ventricles += q / self.n_ventricles;
        }
        if washout > 0.0 {
            // Ventricular outflow through the aqueduct to the outlet zone.
            let q = self.ventricles * self.n_ventricles * (1.0 - (-washout * h).exp());
            self.ventricles -= q / self.n_ventricles;
            for &i in &self.outlet {
                self.c[i] += q / n_outlet;
            }
        }
    }

    fn eliminate(&mut self, factor: f64) {
        self.c.iter_mut().for_each(|v| *v *= factor);
        self.aqueduct *= factor;
        self.ventricles *= factor;
    }

    fn mass(&self) -> f64 {
        let diffusing: f64 = self.c.iter().sum();
        (diffusing + self.aqueduct * self.n_aqueduct + self.ventricles * self.n_ventricles) * self.cell_area
    }

    fn snapshot(&self) -> PlaneField {
        let n = self.geom.n;
        let m = self.m;
        let concentration = self
            .geom
            .labels
            .iter()
            .enumerate()
            .map(|(idx, l)| match l {
                Label::Aqueduct => self.aqueduct,
                Label::Ventricle => self.ventricles,
                _ => self.c[(idx / n + 1) * m + idx % n + 1],
            })
            .collect();
        PlaneField { concentration, aqueduct: self.aqueduct, ventricles: self.ventricles, mass: self.mass() }
    }
}

/// Runs the transport model and returns the state at every time in
/// `schedule` (hours, ascending, non-negative).
pub fn simulate_tracer(
    subject: &PhantomSubject,
    schedule: &[f64],
    options: SimulationOptions,
) -> Result<Vec<ConcentrationField>> {
    if schedule.iter().any(|t| !t.is_finite() || *t < 0.0) || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PhantomError::Schedule(format!("{schedule:?} is not strictly ascending and non-negative")));
    }
    let k = &subject.kinetics;
    let scale = (subject.grid as f64 / 64.0).powi(2);
    let (d_par, d_sas) = (k.d_parenchyma * scale, k.d_sas * scale);
    let limit = stability_limit(d_par.max(d_sas));
    let dt = match options.step {
        Some(dt) if !(dt > 0.0 && dt <= limit) => {
            return Err(PhantomError::Unstable { step: dt, limit });
        }
        Some(dt) => dt,
        None => STEP_SAFETY * limit,
    };
    let mut states: Vec<PlaneState> =
        subject.planes.iter().map(|g| PlaneState::new(g, k, d_par, d_sas)).collect();
    let mut out = Vec::with_capacity(schedule.len());
    let mut t = 0.0;
    for &target in schedule {
        let span = target - t;
        let steps = (span / dt).ceil() as usize;
        for s in 0..steps {
            let t0 = t + span * s as f64 / steps as f64;
            let t1 = t + span * (s + 1) as f64 / steps as f64;
            let h = t1 - t0;
            let dose = k.dose * (k.cumulative_inflow(t1) - k.cumulative_inflow(t0));
            let (rate, wash) = match k.transient {
                Some(tr) if t0 >= tr.end => (0.0, tr.washout),
                _ => (k.reflux, 0.0),
            };
            let decay = (-k.elimination * h).exp();
            for st in &mut states {
                let g_outlet = rate * AQUEDUCT_RATE * st.n_aqueduct;
                let g_ventricles = rate * VENTRICLE_RATE * st.n_ventricles;
                st.diffuse(h);
                st.inflow(dose);
                st.exchange(h, g_outlet, g_ventricles, wash);
                st.eliminate(decay);
            }
        }
        t = target;
        let planes = [states[0].snapshot(), states[1].snapshot()];
        debug_assert!(planes.iter().all(|p| p.concentration.iter().all(|&c| c >= 0.0)));
        out.push(ConcentrationField { time: target, planes });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, PhantomConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn subject(grade: u8) -> PhantomSubject {
        generate_subject("k", 5, grade, &PhantomConfig::default()).unwrap()
    }

    /// State with random concentrations on every cell inside the head.
    fn random_state(s: &PhantomSubject, seed: u64) -> PlaneState<'_> {
        let mut st = PlaneState::new(&s.planes[0], &s.kinetics, 0.8, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (st.geom.n, st.m);
        for (i, l) in st.geom.labels.iter().enumerate() {
            if matches!(l, Label::Sas | Label::Parenchyma) {
                st.c[(i / n + 1) * m + i % n + 1] = rng.random_range(0.0..1.0);
            }
        }
        st.aqueduct = 0.3;
        st.ventricles = 0.1;
        st
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
    }

    #[test]
    fn transport_steps_conserve_mass() {
        let s = subject(4);
        let mut st = random_state(&s, 1);
        let h = STEP_SAFETY * stability_limit(6.0);
        for _ in 0..50 {
            let before = st.mass();
            st.diffuse(h);
            assert!(close(st.mass(), before));
            let before = st.mass();
            st.exchange(h, 5.0, 0.5, 0.0);
            assert!(close(st.mass(), before));
            let before = st.mass();
            st.exchange(h, 0.0, 0.0, 0.4);
            assert!(close(st.mass(), before));
        }
    }

    #[test]
    fn inflow_and_elimination_account_exactly() {
        let s = subject(3);
        let mut st = random_state(&s, 2);
        let before = st.mass();
        st.inflow(0.01);
        assert!(close(st.mass(), before + 0.01));
        let before = st.mass();
        st.eliminate(0.9);
        assert!(close(st.mass(), 0.9 * before));
    }

    #[test]
    fn step_beyond_stability_limit_is_rejected() {
        let s = subject(0);
        let limit = stability_limit(s.kinetics.d_parenchyma.max(s.kinetics.d_sas));
        let r = simulate_tracer(&s, &[0.0, 1.0], SimulationOptions { step: Some(1.01 * limit) });
        assert!(matches!(r, Err(PhantomError::Unstable { .. })));
        assert!(simulate_tracer(&s, &[1.0, 0.5], SimulationOptions::default()).is_err());
    }

    #[test]
    fn no_reflux_keeps_ventricles_empty() {
        let s = subject(0);
        let fields = simulate_tracer(&s, &[1.5, 24.0], SimulationOptions::default()).unwrap();
        for f in &fields {
            assert!(f.planes.iter().all(|p| p.ventricles == 0.0 && p.aqueduct == 0.0));
        }
        assert!(fields[1].planes[0].mass > fields[0].planes[0].mass);
    }
}
