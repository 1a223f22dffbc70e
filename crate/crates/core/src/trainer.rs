//! Pixelwise losses, the mini-batch Adam training loop and prediction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::preprocess::{Dataset, PreprocessError};
use crate::tensor::{AdamConfig, AdamState, Mode, Real, Tensor, TensorError};
use crate::unet::{UNet, UNetError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid loss curve: {0}")]
    Curve(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] UNetError),
    #[error(transparent)]
    Data(#[from] PreprocessError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    L1,
    L2,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(format!("unknown loss `{other}` (expected l1 or l2)")),
        }
    }
}

/// Mean pixel loss and its gradient with respect to `pred`. The L1
/// subgradient at exact equality is zero.
pub fn loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())).into());
    }
    let n = pred.len() as f64;
    let scale = T::from_f64(match kind {
        LossKind::L1 => 1.0 / n,
        LossKind::L2 => 2.0 / n,
    });
    let mut total = 0.0f64;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let d = p - y;
            match kind {
                LossKind::L1 => {
                    total += d.as_f64().abs();
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                }
                LossKind::L2 => {
                    total += d.as_f64() * d.as_f64();
                    scale * d
                }
            }
        })
        .collect();
    Ok((total / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs between loss-curve records; the last epoch is always recorded.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { loss: LossKind::L2, epochs: 250, batch_size: 8, learning_rate: 1e-3, seed: 0, log_every: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(TrainError::Config("epochs, batch_size and log_every must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

pub const LOSS_CURVE_HEADER: &str = "epoch,train_loss,test_loss";

impl LossCurve {
    pub fn last(&self) -> Option<&LossRecord> {
        self.records.last()
    }

    /// Record with the lowest test loss; the earliest wins ties.
    pub fn best_test(&self) -> Option<&LossRecord> {
        self.records.iter().reduce(|best, r| if r.test_loss < best.test_loss { r } else { best })
    }

    pub fn at_epoch(&self, epoch: usize) -> Option<&LossRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    /// CSV with shortest round-trip decimals.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOSS_CURVE_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!("{},{:?},{:?}\n", r.epoch, r.train_loss, r.test_loss));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOSS_CURVE_HEADER) {
            return Err(TrainError::Curve("missing header".into()));
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                let bad = || TrainError::Curve(format!("bad row `{l}`"));
                if cols.len() != 3 {
                    return Err(bad());
                }
                Ok(LossRecord {
                    epoch: cols[0].parse().map_err(|_| bad())?,
                    train_loss: cols[1].parse().map_err(|_| bad())?,
                    test_loss: cols[2].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}

fn check_channels(model: &UNet<f32>, data: &Dataset) -> Result<()> {
    match data.input_channels() {
        Some(c) if c != model.config().in_channels => Err(TrainError::Config(format!(
            "{} dataset has {c} input channels, the network expects {}",
            data.split.name(),
            model.config().in_channels
        ))),
        _ => Ok(()),
    }
}

/// Eval-mode mean per-sample loss over a dataset, batched in a fixed order.
pub fn evaluate_loss(model: &UNet<f32>, data: &Dataset, kind: LossKind, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.infer(&x)?;
        total += loss(&pred, &y, kind)?.0 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Runs the epoch loop in place on `model`. Each epoch reshuffles the
/// training set; the recorded training loss is the sample-weighted mean of
/// the mini-batch losses seen during that epoch.
pub fn train(model: &mut UNet<f32>, train_set: &Dataset, test_set: &Dataset, config: &TrainConfig) -> Result<LossCurve> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    check_channels(model, train_set)?;
    check_channels(model, test_set)?;
    let mut adam = AdamState::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = LossCurve::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk)?;
            let (pred, tape) = model.forward(&x, Mode::Train)?;
            let (value, grad) = loss(&pred, &y, config.loss)?;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            model.store_mut().zero_grad();
            model.backward(tape, &grad)?;
            adam.step(&mut model.store_mut().trainable_mut())?;
            epoch_loss += value * chunk.len() as f64;
        }
        if epoch % config.log_every == 0 || epoch == config.epochs {
            let test_loss = evaluate_loss(model, test_set, config.loss, config.batch_size)?;
            curve.records.push(LossRecord { epoch, train_loss: epoch_loss / train_set.len() as f64, test_loss });
        }
    }
    Ok(curve)
}

/// Eval-mode network output, one `[out, H, W]` tensor per input `[C, H, W]`.
pub fn predict_raw(model: &UNet<f32>, inputs: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        for t in chunk {
            if t.shape().len() != 3 || t.shape()[0] != model.config().in_channels {
                return Err(TrainError::Config(format!(
                    "input {:?} does not match {} network input channels",
                    t.shape(),
                    model.config().in_channels
                )));
            }
        }
        let y = model.infer(&Tensor::stack(chunk)?)?;
        for i in 0..chunk.len() {
            let p = y.batch_item(i)?;
            let shape = p.shape()[1..].to_vec();
            out.push(p.reshape(shape)?);
        }
    }
    Ok(out)
}

pub fn clamp_unit(mut t: Tensor<f32>) -> Tensor<f32> {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    t
}

/// [`predict_raw`] clamped to [0, 1].
pub fn predict(model: &UNet<f32>, inputs: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    Ok(predict_raw(model, inputs, batch_size)?.into_iter().map(clamp_unit).collect())
}
