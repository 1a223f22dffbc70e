//! Built-in verification suites: finite-difference checks of every layer and
//! of a small network, and an exact comparison of the convolution kernel
//! against a plain nested loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, concat_channels, conv1x1, conv2d_same_backward, conv3x3,
    conv3x3_backward, grad_check, maxpool2x2, maxpool2x2_backward, relu, relu_backward, split_channels,
    upconv2x2, upconv2x2_backward, BatchNormParams, Mode, RunningStats, Tensor,
};
use crate::unet::{UNet, UNetConfig};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
const NETWORK_STEP: f64 = 1e-5;
/// Required distance of every ReLU input and pooling gap from its kink.
const NETWORK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Values at least 0.05 away from zero, for ReLU inputs.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        v.signum() * (0.05 + v.abs())
    })
}

/// Distinct values spaced 0.01 apart in random order, so no pooling window ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.01 - n as f64 * 0.005)
}

/// `sum(r * y)` for a fixed random `r`: its gradient with respect to `y` is `r`.
struct Probe {
    r: Tensor<f64>,
}

impl Probe {
    fn new(rng: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        Self { r: normal(rng, shape) }
    }
    fn value(&self, y: &Tensor<f64>) -> f64 {
        y.data().iter().zip(self.r.data()).map(|(a, b)| a * b).sum()
    }
}

fn check(name: &str, tolerance: f64, err: f64, out: &mut Vec<Check>) {
    out.push(Check { name: name.to_string(), max_relative_error: err, tolerance });
}

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty vector")
}

fn conv_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let x = normal(rng, &[1, 2, 4, 4]);
    let w = normal(rng, &[3, 2, 3, 3]);
    let b = normal(rng, &[3]);
    let p = Probe::new(rng, &[1, 3, 4, 4]);
    let g = conv3x3_backward(&x, &w, &p.r, true).unwrap();
    let f = |xx: &Tensor<f64>| p.value(&conv3x3(xx, &w, b.data()).unwrap());
    check("conv3x3 input", LAYER_TOLERANCE, grad_check(f, g.input.as_ref().unwrap().data(), &x, STEP), out);
    let f = |ww: &Tensor<f64>| p.value(&conv3x3(&x, ww, b.data()).unwrap());
    check("conv3x3 weight", LAYER_TOLERANCE, grad_check(f, g.weight.data(), &w, STEP), out);
    let f = |bb: &Tensor<f64>| p.value(&conv3x3(&x, &w, bb.data()).unwrap());
    check("conv3x3 bias", LAYER_TOLERANCE, grad_check(f, &g.bias, &b, STEP), out);

    let x = normal(rng, &[2, 3, 3, 5]);
    let w = normal(rng, &[2, 3, 1, 1]);
    let b = normal(rng, &[2]);
    let p = Probe::new(rng, &[2, 2, 3, 5]);
    let g = conv2d_same_backward(&x, &w, &p.r, true).unwrap();
    let f = |xx: &Tensor<f64>| p.value(&conv1x1(xx, &w, b.data()).unwrap());
    check("conv1x1 input", LAYER_TOLERANCE, grad_check(f, g.input.as_ref().unwrap().data(), &x, STEP), out);
    let f = |ww: &Tensor<f64>| p.value(&conv1x1(&x, ww, b.data()).unwrap());
    check("conv1x1 weight", LAYER_TOLERANCE, grad_check(f, g.weight.data(), &w, STEP), out);
}

fn upconv_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let x = normal(rng, &[1, 2, 3, 3]);
    let w = normal(rng, &[2, 3, 2, 2]);
    let b = normal(rng, &[3]);
    let p = Probe::new(rng, &[1, 3, 6, 6]);
    let g = upconv2x2_backward(&x, &w, &p.r).unwrap();
    let f = |xx: &Tensor<f64>| p.value(&upconv2x2(xx, &w, b.data()).unwrap());
    check("upconv2x2 input", LAYER_TOLERANCE, grad_check(f, g.input.as_ref().unwrap().data(), &x, STEP), out);
    let f = |ww: &Tensor<f64>| p.value(&upconv2x2(&x, ww, b.data()).unwrap());
    check("upconv2x2 weight", LAYER_TOLERANCE, grad_check(f, g.weight.data(), &w, STEP), out);
    let f = |bb: &Tensor<f64>| p.value(&upconv2x2(&x, &w, bb.data()).unwrap());
    check("upconv2x2 bias", LAYER_TOLERANCE, grad_check(f, &g.bias, &b, STEP), out);
}

fn pool_relu_concat_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let x = distinct(rng, &[2, 2, 4, 6]);
    let p = Probe::new(rng, &[2, 2, 2, 3]);
    let (_, idx) = maxpool2x2(&x).unwrap();
    let g = maxpool2x2_backward(&idx, &p.r).unwrap();
    let f = |xx: &Tensor<f64>| p.value(&maxpool2x2(xx).unwrap().0);
    check("maxpool2x2", LAYER_TOLERANCE, grad_check(f, g.data(), &x, STEP), out);

    let x = off_zero(rng, &[2, 3, 4, 4]);
    let p = Probe::new(rng, &[2, 3, 4, 4]);
    let g = relu_backward(&x, &p.r).unwrap();
    let f = |xx: &Tensor<f64>| p.value(&relu(xx));
    check("relu", LAYER_TOLERANCE, grad_check(f, g.data(), &x, STEP), out);

    let a = normal(rng, &[2, 2, 3, 3]);
    let c = normal(rng, &[2, 3, 3, 3]);
    let p = Probe::new(rng, &[2, 5, 3, 3]);
    let (ga, gc) = split_channels(&p.r, 2).unwrap();
    let f = |aa: &Tensor<f64>| p.value(&concat_channels(aa, &c).unwrap());
    check("concat first operand", LAYER_TOLERANCE, grad_check(f, ga.data(), &a, STEP), out);
    let f = |cc: &Tensor<f64>| p.value(&concat_channels(&a, cc).unwrap());
    check("concat second operand", LAYER_TOLERANCE, grad_check(f, gc.data(), &c, STEP), out);
}

fn batchnorm_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let params = BatchNormParams::default();
    for mode in [Mode::Train, Mode::Eval] {
        let label = if mode == Mode::Train { "train" } else { "eval" };
        let x = normal(rng, &[3, 2, 3, 3]);
        let gamma = normal(rng, &[2]);
        let beta = normal(rng, &[2]);
        let running = RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7] };
        let p = Probe::new(rng, &[3, 2, 3, 3]);
        let run = |xx: &Tensor<f64>, gg: &[f64], bb: &[f64]| {
            let mut rs = running.clone();
            batchnorm2d(xx, gg, bb, &mut rs, mode, params).unwrap()
        };
        let (_, cache) = run(&x, gamma.data(), beta.data());
        let g = batchnorm2d_backward(&cache, gamma.data(), &p.r).unwrap();
        let f = |xx: &Tensor<f64>| p.value(&run(xx, gamma.data(), beta.data()).0);
        check(&format!("batchnorm2d {label} input"), LAYER_TOLERANCE, grad_check(f, g.input.data(), &x, STEP), out);
        let f = |gg: &Tensor<f64>| p.value(&run(&x, gg.data(), beta.data()).0);
        check(&format!("batchnorm2d {label} gamma"), LAYER_TOLERANCE, grad_check(f, &g.gamma, &gamma, STEP), out);
        let f = |bb: &Tensor<f64>| p.value(&run(&x, gamma.data(), bb.data()).0);
        check(&format!("batchnorm2d {label} beta"), LAYER_TOLERANCE, grad_check(f, &g.beta, &beta, STEP), out);
    }
}

/// Mean squared error of a depth-2, base-4 network on a 2x2x16x16 batch in
/// train mode. Checks the input gradient and every trainable parameter.
/// Random draws are repeated until the point sits clear of every kink.
fn network_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let (net, x) = loop {
        let config = UNetConfig { in_channels: 2, out_channels: 2, base_features: 4, depth: 2, seed: rng.random() };
        let mut net = UNet::<f64>::new(config).unwrap();
        let x = normal(rng, &[2, 2, 16, 16]);
        let initial = net.clone();
        if net.forward(&x, Mode::Train).unwrap().1.kink_margin() >= NETWORK_MARGIN {
            break (initial, x);
        }
    };
    let target = Tensor::from_fn(&[2, 2, 16, 16], |_| rng.random_range(0.0..1.0));
    let mse = |y: &Tensor<f64>| {
        y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
    };
    let loss = |n: &UNet<f64>, xx: &Tensor<f64>| mse(&n.clone().forward(xx, Mode::Train).unwrap().0);

    let mut trained = net.clone();
    let (y, tape) = trained.forward(&x, Mode::Train).unwrap();
    let n = y.len() as f64;
    let dy = Tensor::from_fn(y.shape(), |i| 2.0 * (y.data()[i] - target.data()[i]) / n);
    let dx = trained.backward(tape, &dy).unwrap();
    check("network input", NETWORK_TOLERANCE, grad_check(|xx| loss(&net, xx), dx.data(), &x, NETWORK_STEP), out);

    let mut analytic = Vec::new();
    let mut values = Vec::new();
    for prm in trained.store().params().iter().filter(|p| p.trainable) {
        analytic.extend_from_slice(prm.value.grad().expect("every trainable parameter receives a gradient"));
        values.extend_from_slice(prm.value.data());
    }
    let flat = vec_tensor(&values);
    let f = |v: &Tensor<f64>| {
        let mut n = net.clone();
        let mut at = 0;
        for prm in n.store_mut().params_mut().iter_mut().filter(|p| p.trainable) {
            let len = prm.value.len();
            prm.value.data_mut().copy_from_slice(&v.data()[at..at + len]);
            at += len;
        }
        loss(&n, &x)
    };
    check("network parameters", NETWORK_TOLERANCE, grad_check(f, &analytic, &flat, NETWORK_STEP), out);
}

/// Runs every finite-difference check at double precision.
pub fn gradient_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    conv_checks(&mut rng, &mut out);
    upconv_checks(&mut rng, &mut out);
    pool_relu_concat_checks(&mut rng, &mut out);
    batchnorm_checks(&mut rng, &mut out);
    network_checks(&mut rng, &mut out);
    out
}

/// Plain nested-loop same-padded 3x3 cross-correlation. Padding taps
/// contribute `w * 0` so the operation sequence matches the fast kernel.
pub fn reference_conv3x3(x: &Tensor<f32>, w: &Tensor<f32>, bias: &[f32]) -> Vec<f32> {
    let (b, c_in, h, wd) = x.dims4().unwrap();
    let c_out = w.shape()[0];
    let (xv, wv) = (x.data(), w.data());
    let mut out = vec![0.0f32; b * c_out * h * wd];
    for n in 0..b {
        for co in 0..c_out {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    0.0
                                } else {
                                    xv[((n * c_in + ci) * h + sy as usize) * wd + sx as usize]
                                };
                                acc += wv[((co * c_in + ci) * 3 + ky) * 3 + kx] * v;
                            }
                        }
                    }
                    out[((n * c_out + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Number of random cases (out of `cases`) where the fast single-precision
/// convolution differs in any bit from [`reference_conv3x3`].
pub fn conv_oracle(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=20),
            rng.random_range(1..=40),
        ];
        let c_out = rng.random_range(1..=9);
        let x = Tensor::from_fn(&shape, |_| rng.random_range(-2.0f32..2.0));
        let w = Tensor::from_fn(&[c_out, shape[1], 3, 3], |_| rng.random_range(-1.0f32..1.0));
        let bias: Vec<f32> = (0..c_out).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let fast = conv3x3(&x, &w, &bias).unwrap();
        let slow = reference_conv3x3(&x, &w, &bias);
        if fast.data().iter().zip(&slow).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    mismatches
}
