use super::{check_finite, Real, Result, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormParams {
    pub eps: f64,
    /// Weight of the current batch in the running-statistics average.
    pub momentum: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        Self { eps: BN_EPSILON, momentum: BN_MOMENTUM }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: Mode,
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn check_params<T: Real>(input: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(TensorError::Shape(format!(
            "batch norm over {c} channels got gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok((b, c, h * w))
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and folds them into `running`; eval mode reads `running` only.
pub fn batchnorm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &mut RunningStats<T>,
    mode: Mode,
    params: BatchNormParams,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    if mode == Mode::Eval {
        return batchnorm2d_eval(input, gamma, beta, running, params);
    }
    let (b, c, hw) = check_params(input, gamma, beta)?;
    let n = b * hw;
    if n < 2 {
        return Err(TensorError::Shape("train-mode batch norm needs at least 2 values per channel".into()));
    }
    let x = input.data();
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(params.eps);
    let m = T::from_f64(params.momentum);
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..b).map(move |bi| &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]);
        let mean = planes().map(|p| p.iter().copied().sum::<T>()).sum::<T>() / nf;
        let var = planes()
            .map(|p| p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for bi in 0..b {
            let o = (bi * c + ch) * hw;
            for i in o..o + hw {
                out[i] = (x[i] - mean) * is;
            }
        }
        let unbiased = var * nf / T::from_f64((n - 1) as f64);
        running.mean[ch] = (T::one() - m) * running.mean[ch] + m * mean;
        running.var[ch] = (T::one() - m) * running.var[ch] + m * unbiased;
    }
    let normalized = Tensor::new(input.shape().to_vec(), out.clone())?;
    for ch in 0..c {
        for bi in 0..b {
            let o = (bi * c + ch) * hw;
            for v in &mut out[o..o + hw] {
                *v = gamma[ch] * *v + beta[ch];
            }
        }
    }
    let y = Tensor::new(input.shape().to_vec(), out)?;
    check_finite(&y, "batchnorm2d");
    Ok((y, BatchNormCache { mode, normalized, inv_std }))
}

/// Eval-mode normalization with frozen running statistics.
pub fn batchnorm2d_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &RunningStats<T>,
    params: BatchNormParams,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (b, c, hw) = check_params(input, gamma, beta)?;
    let x = input.data();
    let eps = T::from_f64(params.eps);
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    for bi in 0..b {
        for ch in 0..c {
            let o = (bi * c + ch) * hw;
            for i in o..o + hw {
                let xh = (x[i] - running.mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache {
            mode: Mode::Eval,
            normalized: Tensor::new(input.shape().to_vec(), normalized)?,
            inv_std,
        },
    ))
}

pub fn batchnorm2d_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(TensorError::Shape(format!(
            "batch norm gradient {:?} does not match activation {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let (b, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for bi in 0..b {
            let o = (bi * c + ch) * hw;
            dbeta[ch] = dbeta[ch] + dy[o..o + hw].iter().copied().sum::<T>();
            dgamma[ch] = dgamma[ch] + dy[o..o + hw].iter().zip(&xh[o..o + hw]).map(|(&g, &x)| g * x).sum::<T>();
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let scale = gamma[ch] * cache.inv_std[ch];
        for bi in 0..b {
            let o = (bi * c + ch) * hw;
            for i in o..o + hw {
                dx[i] = match cache.mode {
                    Mode::Train => scale * (dy[i] - dbeta[ch] / n - xh[i] * dgamma[ch] / n),
                    Mode::Eval => scale * dy[i],
                };
            }
        }
    }
    Ok(BatchNormGrads { input: Tensor::new(grad_out.shape().to_vec(), dx)?, gamma: dgamma, beta: dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact() -> BatchNormParams {
        BatchNormParams { eps: 0.0, momentum: BN_MOMENTUM }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[2, 1, 3, 3], 3.5f64);
        let mut rs = RunningStats::new(1);
        let (y, _) = batchnorm2d(&x, &[1.0], &[0.7], &mut rs, Mode::Train, BatchNormParams::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn two_values_normalize_to_unit() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.0f64, 2.0]).unwrap();
        let mut rs = RunningStats::new(1);
        let (y, _) = batchnorm2d(&x, &[1.0], &[0.0], &mut rs, Mode::Train, exact()).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        // running stats: mean 0.1 * 1, var 0.9 * 1 + 0.1 * 2 (unbiased)
        assert!((rs.mean[0] - 0.1).abs() < 1e-15);
        assert!((rs.var[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64 - 7.0);
        let mut rs = RunningStats::new(3);
        let (y, _) = batchnorm2d(&x, &[1.0; 3], &[0.0; 3], &mut rs, Mode::Eval, exact()).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(rs, RunningStats::new(3));
    }

    #[test]
    fn single_value_rejected_in_train_mode() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let mut rs = RunningStats::new(1);
        assert!(batchnorm2d(&x, &[1.0], &[0.0], &mut rs, Mode::Train, exact()).is_err());
    }
}
