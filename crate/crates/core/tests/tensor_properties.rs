use proptest::prelude::*;
use tracernet_core::tensor::*;

/// Direct evaluation of a same-padded 3x3 convolution, accumulated in f64.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let (b, ci, h, wd) = x.dims4().unwrap();
    let co = w.shape()[0];
    let mut out = vec![0.0; b * co * h * wd];
    for n in 0..b {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                    * x.data()[((n * ci + c) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn conv_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Vec<f64>)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..7, 1usize..7).prop_flat_map(|(b, ci, co, h, w)| {
        (tensor(vec![b, ci, h, w]), tensor(vec![co, ci, 3, 3]), prop::collection::vec(-1.0f64..1.0, co))
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_sum((x, w, bias) in conv_case()) {
        let y = conv3x3(&x, &w, &bias).unwrap();
        prop_assert!(close(y.data(), &naive_conv(&x, &w, &bias), 1e-12));
    }

    #[test]
    fn conv_is_linear_in_input((x, w, _) in conv_case(), a in -2.0f64..2.0) {
        let zero = vec![0.0; w.shape()[0]];
        let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| a * v).collect()).unwrap();
        let sum = Tensor::new(x.shape().to_vec(), x.data().iter().zip(scaled.data()).map(|(p, q)| p + q).collect()).unwrap();
        let fx = conv3x3(&x, &w, &zero).unwrap();
        let fs = conv3x3(&scaled, &w, &zero).unwrap();
        let fsum = conv3x3(&sum, &w, &zero).unwrap();
        let expect: Vec<f64> = fx.data().iter().zip(fs.data()).map(|(p, q)| p + q).collect();
        prop_assert!(close(fsum.data(), &expect, 1e-12));
    }

    #[test]
    fn delta_kernel_is_identity(x in (1usize..3, 1usize..4, 1usize..8, 1usize..8).prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, h, w]))) {
        let c = x.shape()[1];
        let mut w = Tensor::<f64>::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            w.data_mut()[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv3x3(&x, &w, &vec![0.0; c]).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn maxpool_stays_within_window(x in (1usize..3, 1usize..3, 1usize..5, 1usize..5).prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, 2 * h, 2 * w]))) {
        let (b, c, h, w) = x.dims4().unwrap();
        let (y, _) = maxpool2x2(&x).unwrap();
        let global = x.data().iter().copied().fold(f64::MIN, f64::max);
        for p in 0..b * c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let v = y.data()[(p * (h / 2) + oy) * (w / 2) + ox];
                    let at = |dy: usize, dx: usize| x.data()[(p * h + 2 * oy + dy) * w + 2 * ox + dx];
                    let window = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                    prop_assert!(v <= global);
                    prop_assert!(window.contains(&v));
                    prop_assert!(window.iter().all(|&u| u <= v));
                }
            }
        }
    }

    #[test]
    fn maxpool_backward_routes_all_gradient(x in (1usize..3, 1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, 2 * h, 2 * w]))) {
        let (y, idx) = maxpool2x2(&x).unwrap();
        let g = Tensor::from_fn(y.shape(), |i| 1.0 + i as f64);
        let dx = maxpool2x2_backward(&idx, &g).unwrap();
        prop_assert_eq!(dx.data().iter().sum::<f64>(), g.data().iter().sum::<f64>());
        prop_assert_eq!(dx.data().iter().filter(|v| **v != 0.0).count(), y.len());
    }

    #[test]
    fn batchnorm_train_output_is_standardized(x in (2usize..4, 1usize..4, 2usize..6, 2usize..6).prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, h, w]))) {
        let (b, c, h, w) = x.dims4().unwrap();
        let mut running = RunningStats::new(c);
        let (y, _) = batchnorm2d(&x, &vec![1.0; c], &vec![0.0; c], &mut running, Mode::Train, BatchNormParams::default()).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|n| y.data()[(n * c + ch) * h * w..(n * c + ch + 1) * h * w].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn concat_then_split_round_trips(
        (a, b) in (1usize..3, 1usize..4, 1usize..4, 1usize..5, 1usize..5)
            .prop_flat_map(|(n, ca, cb, h, w)| (tensor(vec![n, ca, h, w]), tensor(vec![n, cb, h, w])))
    ) {
        let joined = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&joined, a.shape()[1]).unwrap();
        prop_assert_eq!(a2, a);
        prop_assert_eq!(b2, b);
    }

    #[test]
    fn relu_is_nonnegative_and_idempotent(x in (1usize..20).prop_flat_map(|n| tensor(vec![n]))) {
        let y = relu(&x);
        prop_assert!(y.data().iter().all(|v| *v >= 0.0));
        prop_assert_eq!(relu(&y), y);
    }

    #[test]
    fn glt_round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut state = seed;
        let t = Tensor::<f32>::from_fn(&shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f32::from_bits((state >> 32) as u32 & 0xbf7f_ffff)
        });
        let mut buf = Vec::new();
        write_glt_to(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_glt_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn f32_conv_matches_reference_bitwise() {
    use tracernet_core::selftest::reference_conv3x3;
    let x = Tensor::<f32>::from_fn(&[2, 5, 9, 7], |i| ((i * 37 % 101) as f32 - 50.0) / 17.0);
    let w = Tensor::<f32>::from_fn(&[11, 5, 3, 3], |i| ((i * 53 % 89) as f32 - 44.0) / 31.0);
    let bias: Vec<f32> = (0..11).map(|i| i as f32 * 0.125 - 0.5).collect();
    let y = conv3x3(&x, &w, &bias).unwrap();
    let r = reference_conv3x3(&x, &w, &bias);
    assert!(y.data().iter().zip(&r).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn upconv_gradients_match_finite_differences() {
    let x = Tensor::<f64>::from_fn(&[2, 3, 3, 4], |i| ((i * 29 % 23) as f64 - 11.0) / 7.0);
    let w = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| ((i * 17 % 13) as f64 - 6.0) / 5.0);
    let bias = [0.3, -0.2];
    let probe = Tensor::<f64>::from_fn(&[2, 2, 6, 8], |i| ((i * 7 % 19) as f64 - 9.0) / 4.0);
    let dot = |y: &Tensor<f64>| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
    let grads = upconv2x2_backward(&x, &w, &probe).unwrap();
    let ex = grad_check(|t| dot(&upconv2x2(t, &w, &bias).unwrap()), grads.input.as_ref().unwrap().data(), &x, 1e-5);
    let ew = grad_check(|t| dot(&upconv2x2(&x, t, &bias).unwrap()), grads.weight.data(), &w, 1e-5);
    assert!(ex < 1e-8 && ew < 1e-8, "{ex} {ew}");
    let db: Vec<f64> = (0..2).map(|c| probe.data()[c * 48..(c + 1) * 48].iter().chain(&probe.data()[96 + c * 48..96 + (c + 1) * 48]).sum()).collect();
    assert!(close(&grads.bias, &db, 1e-12));
}

#[test]
fn adam_matches_scalar_recurrence() {
    let cfg = AdamConfig::default();
    let mut state = AdamState::<f64>::new(cfg);
    let mut p = Tensor::new(vec![1], vec![0.5]).unwrap();
    let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.5f64);
    for (t, g) in [1.0, -0.5, 2.0, 0.25].into_iter().enumerate() {
        p.zero_grad();
        p.accumulate_grad(&[g]);
        state.step(&mut [("p", &mut p)]).unwrap();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let k = (t + 1) as i32;
        let (mh, vh) = (m / (1.0 - cfg.beta1.powi(k)), v / (1.0 - cfg.beta2.powi(k)));
        theta -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        assert!((p.data()[0] - theta).abs() < 1e-15, "step {k}: {} vs {theta}", p.data()[0]);
    }
    assert_eq!(state.step_count(), 4);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut state = AdamState::<f64>::new(AdamConfig::default());
    let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    p.zero_grad();
    p.accumulate_grad(&[f64::NAN, 0.0]);
    let err = state.step(&mut [("weights", &mut p)]).unwrap_err();
    assert!(err.to_string().contains("weights"), "{err}");
    assert_eq!(p.data(), &[1.0, 2.0]);
}
