//! T1-weighted signal model: tissue baseline times `(1 + gain * c)` plus
//! additive Gaussian noise, clamped at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::{Label, Plane};
use super::kinetics::ConcentrationField;
use super::PhantomSubject;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub baseline_parenchyma: f64,
    pub baseline_csf: f64,
    pub baseline_reference: f64,
    /// Signal gain per unit concentration in CSF spaces and in tissue.
    pub gain_csf: f64,
    pub gain_parenchyma: f64,
    /// Standard deviation of the additive noise.
    pub noise_sigma: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            baseline_parenchyma: 0.55,
            baseline_csf: 0.12,
            baseline_reference: 1.0,
            gain_csf: 40.0,
            gain_parenchyma: 4.0,
            noise_sigma: 0.01 * 0.55,
        }
    }
}

impl RenderParams {
    pub fn noise_free(self) -> Self {
        Self { noise_sigma: 0.0, ..self }
    }

    /// Signal of a label before any tracer arrives.
    pub fn baseline(&self, label: Label) -> f64 {
        match label {
            Label::Background => 0.0,
            Label::Parenchyma => self.baseline_parenchyma,
            Label::Ventricle | Label::Aqueduct | Label::Sas => self.baseline_csf,
            Label::Reference => self.baseline_reference,
        }
    }

    fn gain(&self, label: Label) -> f64 {
        match label {
            Label::Parenchyma => self.gain_parenchyma,
            l if l.is_csf() => self.gain_csf,
            _ => 0.0,
        }
    }
}

/// Raw signal of both slices at one scan time, each `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePointImage {
    pub time: f64,
    pub planes: [Tensor<f32>; 2],
}

impl TimePointImage {
    pub fn plane(&self, plane: Plane) -> &Tensor<f32> {
        &self.planes[plane.index()]
    }
}

pub fn render_pair(
    subject: &PhantomSubject,
    field: &ConcentrationField,
    params: &RenderParams,
    noise_seed: u64,
) -> TimePointImage {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = (params.noise_sigma > 0.0).then(|| Normal::new(0.0, params.noise_sigma).expect("finite sigma"));
    let planes = [Plane::Sagittal, Plane::Axial].map(|plane| {
        let geom = subject.plane(plane);
        let c = &field.planes[plane.index()].concentration;
        let n = geom.n;
        Tensor::from_fn(&[n, n], |i| {
            let l = geom.labels[i];
            let mut v = params.baseline(l) * (1.0 + params.gain(l) * c[i]);
            if let Some(d) = &noise {
                v += d.sample(&mut rng);
            }
            v.max(0.0) as f32
        })
    });
    TimePointImage { time: field.time, planes }
}
