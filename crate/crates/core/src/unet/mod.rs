//! Encoder-decoder network with skip connections for image-to-image
//! regression. Every level runs two 3x3 conv + batch norm + ReLU blocks;
//! the contracting path halves the extent with max pooling and doubles the
//! width, the expansive path mirrors it with 2x2 transposed convolutions.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_eval, concat_channels, conv1x1, conv2d_same_backward,
    conv3x3, maxpool2x2, maxpool2x2_backward, relu, relu_backward, split_channels, upconv2x2,
    upconv2x2_backward, BatchNormCache, BatchNormParams, Mode, PoolIndices, Real, RunningStats, Tensor,
    TensorError,
};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION};

/// Upper bound on the bottleneck width `base_features * 2^depth`.
pub const MAX_WIDTH: usize = 4096;

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint does not match the network: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = UNetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Two per input time point (sagittal, axial).
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the first level; each deeper level doubles it.
    pub base_features: usize,
    /// Number of pooling levels.
    pub depth: usize,
    pub seed: u64,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_features == 0 || self.depth == 0 {
            return Err(UNetError::Config(format!("all extents must be positive: {self:?}")));
        }
        let widest = (self.depth < usize::BITS as usize)
            .then(|| self.base_features.checked_mul(1usize << self.depth))
            .flatten();
        match widest {
            Some(w) if w <= MAX_WIDTH => Ok(()),
            _ => Err(UNetError::Config(format!(
                "bottleneck width {} x 2^{} exceeds the cap of {MAX_WIDTH}",
                self.base_features, self.depth
            ))),
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Rejects spatial extents the pooling levels cannot halve evenly.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let d = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(UNetError::Config(format!(
                "input extent {h}x{w} is not divisible by 2^{} = {d}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// A named parameter. Running statistics are stored here too but are not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> WeightStore<T> {
    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> usize {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
        self.params.len() - 1
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// `(name, tensor)` pairs of every trainable parameter, in store order.
    pub fn trainable_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| (p.name.as_str(), &mut p.value))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    fn data(&self, i: usize) -> &[T] {
        self.params[i].value.data()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: ConvIdx,
    bn1: BnIdx,
    conv2: ConvIdx,
    bn2: BnIdx,
}

#[derive(Debug, Clone, Copy)]
struct UpLevel {
    upconv: ConvIdx,
    block: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    store: WeightStore<T>,
    wiring: Wiring,
}

#[derive(Debug, Clone)]
struct Wiring {
    down: Vec<Block>,
    bottleneck: Block,
    up: Vec<UpLevel>,
    head: ConvIdx,
}

// The wiring is a pure function of the config.
impl PartialEq for Wiring {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

struct Builder<T> {
    store: WeightStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut self.rng)))
    }

    /// Fan-in scaled weights: `gain / fan_in` variance.
    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, gain: f64) -> ConvIdx {
        let std = (gain / (c_in * k * k) as f64).sqrt();
        let w = self.gaussian(&[c_out, c_in, k, k], std);
        ConvIdx {
            weight: self.store.push(format!("{prefix}.weight"), w, true),
            bias: self.store.push(format!("{prefix}.bias"), Tensor::zeros(&[c_out]), true),
        }
    }

    fn upconv(&mut self, prefix: &str, c_in: usize, c_out: usize) -> ConvIdx {
        let w = self.gaussian(&[c_in, c_out, 2, 2], (1.0 / c_in as f64).sqrt());
        ConvIdx {
            weight: self.store.push(format!("{prefix}.weight"), w, true),
            bias: self.store.push(format!("{prefix}.bias"), Tensor::zeros(&[c_out]), true),
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        BnIdx {
            gamma: self.store.push(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()), true),
            beta: self.store.push(format!("{prefix}.beta"), Tensor::zeros(&[c]), true),
            mean: self.store.push(format!("{prefix}.run_mean"), Tensor::zeros(&[c]), false),
            var: self.store.push(format!("{prefix}.run_var"), Tensor::full(&[c], T::one()), false),
        }
    }

    fn block(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{prefix}.conv1"), c_in, c_out, 3, 2.0),
            bn1: self.bn(&format!("{prefix}.bn1"), c_out),
            conv2: self.conv(&format!("{prefix}.conv2"), c_out, c_out, 3, 2.0),
            bn2: self.bn(&format!("{prefix}.bn2"), c_out),
        }
    }
}

struct BlockTape<T> {
    input: Tensor<T>,
    bn1: BatchNormCache<T>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    bn2: BatchNormCache<T>,
    pre2: Tensor<T>,
}

/// Activations cached by a forward pass for the matching backward pass.
pub struct Tape<T> {
    mode: Mode,
    down: Vec<(BlockTape<T>, PoolIndices)>,
    skip_channels: Vec<usize>,
    bottleneck: BlockTape<T>,
    up: Vec<(Tensor<T>, BlockTape<T>)>,
    head_input: Tensor<T>,
}

impl<T: Real> Tape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Distance of the cached activations from the nearest point where the
    /// network stops being differentiable: the smallest |ReLU input| and the
    /// smallest gap between a positive pooling maximum and its runner-up.
    pub fn kink_margin(&self) -> f64 {
        let blocks = self
            .down
            .iter()
            .map(|(t, _)| t)
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.up.iter().map(|(_, t)| t));
        let mut margin = f64::INFINITY;
        for t in blocks {
            for v in t.pre1.data().iter().chain(t.pre2.data()) {
                margin = margin.min(v.as_f64().abs());
            }
        }
        for (t, _) in &self.down {
            let (b, c, h, w) = t.pre2.dims4().expect("rank-4 activation");
            let x = t.pre2.data();
            for plane in 0..b * c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let top = plane * h * w + 2 * oy * w + 2 * ox;
                        let mut win = [top, top + 1, top + w, top + w + 1].map(|i| x[i].as_f64().max(0.0));
                        win.sort_by(|a, b| b.total_cmp(a));
                        if win[0] > 0.0 {
                            margin = margin.min(win[0] - win[1]);
                        }
                    }
                }
            }
        }
        margin
    }
}

impl<T: Real> UNet<T> {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { store: WeightStore::default(), rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let mut down = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let c_in = if i == 0 { config.in_channels } else { config.width(i - 1) };
            down.push(b.block(&format!("level{i}.down"), c_in, config.width(i)));
        }
        let d = config.depth;
        let bottleneck = b.block(&format!("level{d}.bottleneck"), config.width(d - 1), config.width(d));
        let mut up = Vec::with_capacity(d);
        for i in (0..d).rev() {
            let upconv = b.upconv(&format!("level{i}.up.upconv"), config.width(i + 1), config.width(i));
            let block = b.block(&format!("level{i}.up"), 2 * config.width(i), config.width(i));
            up.push(UpLevel { upconv, block });
        }
        let head = b.conv("output.conv", config.width(0), config.out_channels, 1, 1.0);
        Ok(Self { config, store: b.store, wiring: Wiring { down, bottleneck, up, head } })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn store(&self) -> &WeightStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut WeightStore<T> {
        &mut self.store
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(UNetError::Tensor(TensorError::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            ))));
        }
        self.config.check_extent(h, w)
    }

    /// Eval-mode prediction with running statistics. Raw, unclamped output.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for blk in &self.wiring.down {
            let out = self.block_eval(blk, &h)?;
            h = maxpool2x2(&out)?.0;
            skips.push(out);
        }
        h = self.block_eval(&self.wiring.bottleneck, &h)?;
        for (lvl, skip) in self.wiring.up.iter().zip(skips.iter().rev()) {
            let u = self.upconv(&lvl.upconv, &h)?;
            h = self.block_eval(&lvl.block, &concat_channels(skip, &u)?)?;
        }
        self.head(&h)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut down = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for i in 0..depth {
            let blk = self.wiring.down[i];
            let (out, tape) = self.block_forward(&blk, h, mode)?;
            let (pooled, idx) = maxpool2x2(&out)?;
            down.push((tape, idx));
            skips.push(out);
            h = pooled;
        }
        let bottleneck_blk = self.wiring.bottleneck;
        let (mut h, bottleneck) = self.block_forward(&bottleneck_blk, h, mode)?;
        let mut up = Vec::with_capacity(depth);
        let mut skip_channels = Vec::with_capacity(depth);
        for j in 0..depth {
            let lvl = self.wiring.up[j];
            let skip = skips.pop().expect("one skip per level");
            let u = self.upconv(&lvl.upconv, &h)?;
            skip_channels.push(skip.shape()[1]);
            let (out, tape) = self.block_forward(&lvl.block, concat_channels(&skip, &u)?, mode)?;
            up.push((h, tape));
            h = out;
        }
        let y = self.head(&h)?;
        Ok((y, Tape { mode, down, skip_channels, bottleneck, up, head_input: h }))
    }

    /// Accumulates parameter gradients for `grad_out` (the loss gradient
    /// with respect to the raw output) and returns the input gradient.
    pub fn backward(&mut self, tape: Tape<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let Tape { mode: _, mut down, skip_channels, bottleneck, up, head_input } = tape;
        let head = self.wiring.head;
        let g = conv2d_same_backward(&head_input, self.store.tensor(head.weight), grad_out, true)?;
        self.accumulate(head, &g.weight, &g.bias);
        let mut grad = g.input.expect("input gradient requested");

        let mut skip_grads = Vec::with_capacity(up.len());
        for (j, (up_input, block_tape)) in up.into_iter().enumerate().rev() {
            let lvl = self.wiring.up[j];
            let g_cat = self.block_backward(&lvl.block, block_tape, &grad)?;
            let (g_skip, g_up) = split_channels(&g_cat, skip_channels[j])?;
            skip_grads.push(g_skip);
            let gu = upconv2x2_backward(&up_input, self.store.tensor(lvl.upconv.weight), &g_up)?;
            self.accumulate(lvl.upconv, &gu.weight, &gu.bias);
            grad = gu.input.expect("upconv input gradient");
        }
        // skip_grads[i] belongs to level i; `grad` is now the bottleneck output gradient.
        let bottleneck_blk = self.wiring.bottleneck;
        grad = self.block_backward(&bottleneck_blk, bottleneck, &grad)?;

        for i in (0..down.len()).rev() {
            let (block_tape, idx) = down.pop().expect("one tape per level");
            let mut g_out = maxpool2x2_backward(&idx, &grad)?;
            let g_skip = &skip_grads[i];
            for (a, &b) in g_out.data_mut().iter_mut().zip(g_skip.data()) {
                *a = *a + b;
            }
            let blk = self.wiring.down[i];
            grad = self.block_backward(&blk, block_tape, &g_out)?;
        }
        Ok(grad)
    }

    fn accumulate(&mut self, idx: ConvIdx, weight: &Tensor<T>, bias: &[T]) {
        self.store.params[idx.weight].value.accumulate_grad(weight.data());
        self.store.params[idx.bias].value.accumulate_grad(bias);
    }

    fn upconv(&self, idx: &ConvIdx, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(upconv2x2(x, self.store.tensor(idx.weight), self.store.data(idx.bias))?)
    }

    fn head(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.wiring.head;
        Ok(conv1x1(x, self.store.tensor(h.weight), self.store.data(h.bias))?)
    }

    fn conv_bn_eval(&self, conv: &ConvIdx, bn: &BnIdx, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = conv3x3(x, self.store.tensor(conv.weight), self.store.data(conv.bias))?;
        let running = RunningStats { mean: self.store.data(bn.mean).to_vec(), var: self.store.data(bn.var).to_vec() };
        let (y, _) = batchnorm2d_eval(
            &c,
            self.store.data(bn.gamma),
            self.store.data(bn.beta),
            &running,
            BatchNormParams::default(),
        )?;
        Ok(relu(&y))
    }

    fn block_eval(&self, blk: &Block, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.conv_bn_eval(&blk.conv1, &blk.bn1, x)?;
        self.conv_bn_eval(&blk.conv2, &blk.bn2, &a)
    }

    fn conv_bn(&mut self, conv: &ConvIdx, bn: &BnIdx, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let c = conv3x3(x, self.store.tensor(conv.weight), self.store.data(conv.bias))?;
        let mut running =
            RunningStats { mean: self.store.data(bn.mean).to_vec(), var: self.store.data(bn.var).to_vec() };
        let (y, cache) = batchnorm2d(
            &c,
            self.store.data(bn.gamma),
            self.store.data(bn.beta),
            &mut running,
            mode,
            BatchNormParams::default(),
        )?;
        if mode == Mode::Train {
            self.store.params[bn.mean].value.data_mut().copy_from_slice(&running.mean);
            self.store.params[bn.var].value.data_mut().copy_from_slice(&running.var);
        }
        Ok((y, cache))
    }

    fn block_forward(&mut self, blk: &Block, input: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockTape<T>)> {
        let (pre1, bn1) = self.conv_bn(&blk.conv1, &blk.bn1, &input, mode)?;
        let act1 = relu(&pre1);
        let (pre2, bn2) = self.conv_bn(&blk.conv2, &blk.bn2, &act1, mode)?;
        let out = relu(&pre2);
        Ok((out, BlockTape { input, bn1, pre1, act1, bn2, pre2 }))
    }

    fn conv_bn_backward(
        &mut self,
        conv: &ConvIdx,
        bn: &BnIdx,
        input: &Tensor<T>,
        cache: &BatchNormCache<T>,
        grad: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let gb = batchnorm2d_backward(cache, self.store.data(bn.gamma), grad)?;
        self.store.params[bn.gamma].value.accumulate_grad(&gb.gamma);
        self.store.params[bn.beta].value.accumulate_grad(&gb.beta);
        let gc = conv2d_same_backward(input, self.store.tensor(conv.weight), &gb.input, true)?;
        self.accumulate(*conv, &gc.weight, &gc.bias);
        Ok(gc.input.expect("input gradient requested"))
    }

    fn block_backward(&mut self, blk: &Block, tape: BlockTape<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = relu_backward(&tape.pre2, grad_out)?;
        let g = self.conv_bn_backward(&blk.conv2, &blk.bn2, &tape.act1, &tape.bn2, &g)?;
        let g = relu_backward(&tape.pre1, &g)?;
        self.conv_bn_backward(&blk.conv1, &blk.bn1, &tape.input, &tape.bn1, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(in_channels: usize, base: usize, depth: usize) -> UNetConfig {
        UNetConfig { in_channels, out_channels: 2, base_features: base, depth, seed: 7 }
    }

    #[test]
    fn names_follow_scheme() {
        let net = UNet::<f32>::new(small(2, 4, 2)).unwrap();
        let names: Vec<&str> = net.store().params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "level0.down.conv1.weight");
        assert!(names.contains(&"level2.bottleneck.conv2.weight"));
        assert!(names.contains(&"level1.up.upconv.weight"));
        assert!(names.contains(&"level0.up.bn2.run_var"));
        assert_eq!(*names.last().unwrap(), "output.conv.bias");
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn first_layer_follows_in_channels() {
        let net = UNet::<f32>::new(small(8, 4, 1)).unwrap();
        assert_eq!(net.store().get("level0.down.conv1.weight").unwrap().value.shape(), &[4, 8, 3, 3]);
    }

    #[test]
    fn rejects_bad_configs_and_extents() {
        assert!(UNet::<f32>::new(small(2, 4, 0)).is_err());
        assert!(UNet::<f32>::new(small(2, 1024, 3)).is_err());
        let net = UNet::<f32>::new(small(2, 4, 2)).unwrap();
        let x = Tensor::zeros(&[1, 2, 6, 8]);
        assert!(matches!(net.infer(&x), Err(UNetError::Config(_))));
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(net.infer(&x).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::<f32>::new(small(2, 4, 2)).unwrap();
        let b = UNet::<f32>::new(small(2, 4, 2)).unwrap();
        assert_eq!(a.store(), b.store());
        let c = UNet::<f32>::new(UNetConfig { seed: 8, ..small(2, 4, 2) }).unwrap();
        assert_ne!(a.store(), c.store());
    }
}
