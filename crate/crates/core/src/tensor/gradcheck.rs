//! Central finite-difference gradient verification.

use super::Tensor;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate `|a - n| / max(|a|, |n|, floor)`, where the floor
/// is `1e-6` times the largest gradient magnitude so that coordinates with a
/// vanishing gradient are judged on an absolute scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-6).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient of a scalar function against central
/// differences with step `h` and returns the maximum relative error.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> f64,
    analytic: &[f64],
    x: &Tensor<f64>,
    h: f64,
) -> f64 {
    let numeric = finite_difference(f, x, h);
    max_relative_error(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let coeffs = [0.3, -1.7, 2.25, 0.0, 5.5];
        let x = Tensor::new(vec![5], vec![1.0, -2.0, 0.5, 3.0, -0.25]).unwrap();
        let f = |t: &Tensor<f64>| t.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum::<f64>();
        let err = grad_check(f, &coeffs, &x, 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &Tensor<f64>| t.data()[0] * t.data()[0] + t.data()[1];
        assert!(grad_check(f, &[2.0, 1.0], &x, 1e-5) < 1e-8);
        assert!(grad_check(f, &[2.0, 1.1], &x, 1e-5) > 0.05);
    }
}
