use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected Adam without weight decay. Moment buffers are allocated on
/// the first step and must keep matching the parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step_count: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.second_moment
    }

    /// Applies one update to every parameter using its accumulated gradient
    /// (a missing gradient counts as zero). Nothing is modified on error.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<T>)]) -> Result<()> {
        if self.step_count == 0 && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if params.len() != self.first_moment.len() {
            return Err(TensorError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for ((name, p), m) in params.iter().zip(&self.first_moment) {
            if p.len() != m.len() {
                return Err(TensorError::Shape(format!(
                    "parameter `{name}` has {} values, optimizer state has {}",
                    p.len(),
                    m.len()
                )));
            }
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TensorError::NonFiniteGradient(name.to_string()));
            }
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.learning_rate);
        let eps = T::from_f64(c.epsilon);
        for (((_, p), m), v) in params.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); m.len()],
            };
            let values = p.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap();
        t.accumulate_grad(&[g]);
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(0.3, 0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[0.3]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [("p", &mut p)]).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15, "{}", p.data()[0]);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        // scalar reference of the Adam recurrences
        let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = param(0.5, 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [("p", &mut p)]).unwrap();
        adam.step(&mut [("p", &mut p)]).unwrap();
        assert!((p.data()[0] - x).abs() < 1e-15);
        assert_eq!(adam.step_count(), 2);
        assert!(adam.second_moment()[0][0] >= 0.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut good = param(1.0, 1.0);
        let mut bad = param(1.0, f64::NAN);
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step(&mut [("good", &mut good), ("level0.down.conv1.weight", &mut bad)]).unwrap_err();
        assert!(err.to_string().contains("level0.down.conv1.weight"));
        assert_eq!(good.data(), &[1.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = param(1.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [("p", &mut p)]).unwrap();
        let mut q = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        assert!(adam.step(&mut [("p", &mut q)]).is_err());
    }
}
