//! Same-padded, stride-1 convolution (cross-correlation).
//!
//! Every output pixel is accumulated as `bias + w*x + w*x + ...` in
//! (input channel, kernel row, kernel column) order, with zero for taps that
//! fall in the padding. The kernel vectorizes across neighbouring pixels, so
//! the per-pixel operation sequence is exactly that of a plain nested loop.

use super::{check_finite, Real, Result, Tensor, TensorError};

/// Pixels handled per accumulator row.
const LANES: usize = 16;
/// Output channels computed together.
const CO_BLOCK: usize = 4;

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv3x3<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    check_kernel(weight, 3)?;
    conv2d_same(input, weight, bias)
}

pub fn conv1x1<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    check_kernel(weight, 1)?;
    conv2d_same(input, weight, bias)
}

pub fn conv3x3_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    check_kernel(weight, 3)?;
    conv2d_same_backward(input, weight, grad_out, need_input_grad)
}

fn check_kernel<T: Real>(weight: &Tensor<T>, k: usize) -> Result<()> {
    let (_, _, kh, kw) = weight.dims4()?;
    if kh != k || kw != k {
        return Err(TensorError::Shape(format!("expected {k}x{k} kernel, got {kh}x{kw}")));
    }
    Ok(())
}

struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn pad(&self) -> usize {
        self.k / 2
    }
    /// Row stride of the padded input; a multiple of LANES plus the halo.
    fn padded_w(&self) -> usize {
        self.w.div_ceil(LANES) * LANES + 2 * self.pad()
    }
    fn padded_h(&self) -> usize {
        self.h + 2 * self.pad()
    }
}

fn geometry<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias_len: usize) -> Result<Geometry> {
    let (batch, c_in, h, w) = input.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in {
        return Err(TensorError::Shape(format!(
            "input has {c_in} channels, kernel expects {wc_in}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::Shape(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if bias_len != c_out {
        return Err(TensorError::Shape(format!("bias has {bias_len} entries, expected {c_out}")));
    }
    Ok(Geometry { batch, c_in, c_out, h, w, k: kh })
}

/// Zero-padded copy of the input with the row layout the kernel expects.
fn pad_input<T: Real>(input: &[T], g: &Geometry) -> Vec<T> {
    let (pw, ph, p) = (g.padded_w(), g.padded_h(), g.pad());
    let mut out = vec![T::zero(); g.batch * g.c_in * ph * pw];
    for plane in 0..g.batch * g.c_in {
        let src = &input[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        let dst = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
        for y in 0..g.h {
            let d = (y + p) * pw + p;
            dst[d..d + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
        }
    }
    out
}

/// Weights regrouped as `[co_block][ci][tap][CO_BLOCK]`, zero-filled past `c_out`.
fn pack_weights<T: Real>(weight: &[T], g: &Geometry) -> Vec<T> {
    let taps = g.k * g.k;
    let blocks = g.c_out.div_ceil(CO_BLOCK);
    let mut packed = vec![T::zero(); blocks * g.c_in * taps * CO_BLOCK];
    for co in 0..g.c_out {
        let (blk, j) = (co / CO_BLOCK, co % CO_BLOCK);
        for ci in 0..g.c_in {
            for t in 0..taps {
                packed[((blk * g.c_in + ci) * taps + t) * CO_BLOCK + j] =
                    weight[(co * g.c_in + ci) * taps + t];
            }
        }
    }
    packed
}

fn conv_kernel<T: Real>(padded: &[T], packed: &[T], bias: &[T], g: &Geometry) -> Vec<T> {
    let (pw, ph, k) = (g.padded_w(), g.padded_h(), g.k);
    let taps = k * k;
    let plane_in = ph * pw;
    let mut out = vec![T::zero(); g.batch * g.c_out * g.h * g.w];
    let mut bias_blk = [T::zero(); CO_BLOCK];
    for b in 0..g.batch {
        let x_batch = &padded[b * g.c_in * plane_in..(b + 1) * g.c_in * plane_in];
        for blk in 0..g.c_out.div_ceil(CO_BLOCK) {
            let co0 = blk * CO_BLOCK;
            let n_co = CO_BLOCK.min(g.c_out - co0);
            bias_blk[..n_co].copy_from_slice(&bias[co0..co0 + n_co]);
            let w_blk = &packed[blk * g.c_in * taps * CO_BLOCK..(blk + 1) * g.c_in * taps * CO_BLOCK];
            for y in 0..g.h {
                for x0 in (0..g.w).step_by(LANES) {
                    let mut acc = [[T::zero(); LANES]; CO_BLOCK];
                    for (j, row) in acc.iter_mut().enumerate() {
                        *row = [bias_blk[j]; LANES];
                    }
                    for ci in 0..g.c_in {
                        let x_plane = &x_batch[ci * plane_in..(ci + 1) * plane_in];
                        let w_ci = &w_blk[ci * taps * CO_BLOCK..(ci + 1) * taps * CO_BLOCK];
                        for ky in 0..k {
                            let row = &x_plane[(y + ky) * pw + x0..(y + ky) * pw + x0 + LANES + k - 1];
                            for kx in 0..k {
                                let wv: &[T; CO_BLOCK] = w_ci
                                    [(ky * k + kx) * CO_BLOCK..(ky * k + kx + 1) * CO_BLOCK]
                                    .try_into()
                                    .unwrap();
                                let xv: &[T; LANES] = row[kx..kx + LANES].try_into().unwrap();
                                for j in 0..CO_BLOCK {
                                    let wj = wv[j];
                                    let a = &mut acc[j];
                                    for l in 0..LANES {
                                        a[l] = a[l] + wj * xv[l];
                                    }
                                }
                            }
                        }
                    }
                    let n_x = LANES.min(g.w - x0);
                    for (j, a) in acc.iter().enumerate().take(n_co) {
                        let o = ((b * g.c_out + co0 + j) * g.h + y) * g.w + x0;
                        out[o..o + n_x].copy_from_slice(&a[..n_x]);
                    }
                }
            }
        }
    }
    out
}

/// Single-precision kernel on 512-bit vectors. Multiplies and adds are
/// separate instructions, so every pixel sees the same rounding sequence as
/// the portable kernel.
mod wide {
    use std::any::{Any, TypeId};

    use super::{Geometry, Real, LANES};

    /// `None` when `T` is not `f32` or the CPU lacks the instructions.
    pub(super) fn conv<T: Real>(padded: &[T], weight: &[T], bias: &[T], g: &Geometry) -> Option<Vec<T>> {
        #[cfg(target_arch = "x86_64")]
        {
            if !std::arch::is_x86_feature_detected!("avx512f") {
                return None;
            }
            if TypeId::of::<T>() != TypeId::of::<f32>() {
                return None;
            }
            // SAFETY: `T` is `f32`, checked above.
            let cast = |v: &[T]| unsafe { std::slice::from_raw_parts(v.as_ptr().cast::<f32>(), v.len()) };
            let (padded, weight, bias) = (cast(padded), cast(weight), cast(bias));
            // SAFETY: the feature check above guarantees AVX-512F.
            let out = unsafe { avx512::conv(padded, weight, bias, g) };
            (Box::new(out) as Box<dyn Any>).downcast::<Vec<T>>().ok().map(|b| *b)
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            let _ = (padded, weight, bias, g, LANES);
            None
        }
    }

    #[cfg(target_arch = "x86_64")]
    mod avx512 {
        use std::arch::x86_64::*;

        use super::super::Geometry;
        use super::LANES;

        /// Output channels per tile.
        const CB: usize = 8;

        fn pack(weight: &[f32], g: &Geometry) -> Vec<f32> {
            let taps = g.k * g.k;
            let mut packed = vec![0.0; g.c_out.div_ceil(CB) * g.c_in * taps * CB];
            for co in 0..g.c_out {
                for ci in 0..g.c_in {
                    for t in 0..taps {
                        packed[(((co / CB) * g.c_in + ci) * taps + t) * CB + co % CB] =
                            weight[(co * g.c_in + ci) * taps + t];
                    }
                }
            }
            packed
        }

        #[target_feature(enable = "avx512f")]
        pub(in super::super) unsafe fn conv(padded: &[f32], weight: &[f32], bias: &[f32], g: &Geometry) -> Vec<f32> {
            let (pw, ph, k) = (g.padded_w(), g.padded_h(), g.k);
            let taps = k * k;
            let plane_in = ph * pw;
            let packed = pack(weight, g);
            let segments = g.w.div_ceil(LANES);
            let mut out = vec![0.0f32; g.batch * g.c_out * g.h * g.w];
            for b in 0..g.batch {
                let x_batch = &padded[b * g.c_in * plane_in..(b + 1) * g.c_in * plane_in];
                for blk in 0..g.c_out.div_ceil(CB) {
                    let co0 = blk * CB;
                    let n_co = CB.min(g.c_out - co0);
                    let mut bias_blk = [0.0f32; CB];
                    bias_blk[..n_co].copy_from_slice(&bias[co0..co0 + n_co]);
                    let w_blk = &packed[blk * g.c_in * taps * CB..(blk + 1) * g.c_in * taps * CB];
                    for y in 0..g.h {
                        let mut seg = 0;
                        while seg < segments {
                            let pair = seg + 1 < segments;
                            let tile = Tile { x_batch, w_blk, bias: &bias_blk, g, pw, plane_in, y, x0: seg * LANES };
                            let sums = if pair { tile.run::<2>() } else { tile.run::<1>() };
                            for (j, lanes) in sums.iter().enumerate().take(n_co) {
                                let o = ((b * g.c_out + co0 + j) * g.h + y) * g.w + seg * LANES;
                                let n_x = (g.w - seg * LANES).min(lanes.len());
                                out[o..o + n_x].copy_from_slice(&lanes[..n_x]);
                            }
                            seg += if pair { 2 } else { 1 };
                        }
                    }
                }
            }
            out
        }

        struct Tile<'a> {
            x_batch: &'a [f32],
            w_blk: &'a [f32],
            bias: &'a [f32; CB],
            g: &'a Geometry,
            pw: usize,
            plane_in: usize,
            y: usize,
            x0: usize,
        }

        impl Tile<'_> {
            /// `S` adjacent 16-pixel segments of one output row for `CB` channels.
            #[target_feature(enable = "avx512f")]
            unsafe fn run<const S: usize>(&self) -> [[f32; 2 * LANES]; CB] {
                let k = self.g.k;
                let taps = k * k;
                let mut acc = [[_mm512_setzero_ps(); S]; CB];
                for (j, a) in acc.iter_mut().enumerate() {
                    *a = [_mm512_set1_ps(self.bias[j]); S];
                }
                let span = S * LANES + k - 1;
                for ci in 0..self.g.c_in {
                    let w_ci = &self.w_blk[ci * taps * CB..(ci + 1) * taps * CB];
                    for ky in 0..k {
                        let start = ci * self.plane_in + (self.y + ky) * self.pw + self.x0;
                        let row = &self.x_batch[start..start + span];
                        for kx in 0..k {
                            let mut xs = [_mm512_setzero_ps(); S];
                            for (s, x) in xs.iter_mut().enumerate() {
                                // SAFETY: `row` holds S * LANES + k - 1 values.
                                *x = _mm512_loadu_ps(row.as_ptr().add(kx + s * LANES));
                            }
                            let w = &w_ci[(ky * k + kx) * CB..(ky * k + kx + 1) * CB];
                            for j in 0..CB {
                                let wv = _mm512_set1_ps(w[j]);
                                for s in 0..S {
                                    acc[j][s] = _mm512_add_ps(acc[j][s], _mm512_mul_ps(wv, xs[s]));
                                }
                            }
                        }
                    }
                }
                let mut sums = [[0.0f32; 2 * LANES]; CB];
                for (out, a) in sums.iter_mut().zip(&acc) {
                    for (s, v) in a.iter().enumerate() {
                        _mm512_storeu_ps(out.as_mut_ptr().add(s * LANES), *v);
                    }
                }
                sums
            }
        }
    }
}

/// Same-padded stride-1 convolution for any odd square kernel.
pub fn conv2d_same<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias.len())?;
    let padded = pad_input(input.data(), &g);
    let out = match wide::conv(&padded, weight.data(), bias, &g) {
        Some(out) => out,
        None => conv_kernel(&padded, &pack_weights(weight.data(), &g), bias, &g),
    };
    let out = Tensor::new(vec![g.batch, g.c_out, g.h, g.w], out)?;
    check_finite(&out, "conv2d");
    Ok(out)
}

pub fn conv2d_same_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, weight, weight.shape()[0])?;
    if grad_out.shape() != [g.batch, g.c_out, g.h, g.w] {
        return Err(TensorError::Shape(format!(
            "upstream gradient {:?} does not match conv output",
            grad_out.shape()
        )));
    }
    let k = g.k;
    let taps = k * k;
    let dy = grad_out.data();

    let mut bias = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for (co, acc) in bias.iter_mut().enumerate() {
            let o = (b * g.c_out + co) * g.h * g.w;
            *acc = *acc + lane_sum(&dy[o..o + g.h * g.w]);
        }
    }

    let dw = weight_grad(input.data(), dy, &g);

    // dX is the same-padded convolution of dY with the flipped, transposed kernel.
    let input_grad = if need_input_grad {
        let w = weight.data();
        let mut flipped = vec![T::zero(); g.c_in * g.c_out * taps];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for t in 0..taps {
                    flipped[(ci * g.c_out + co) * taps + (taps - 1 - t)] = w[(co * g.c_in + ci) * taps + t];
                }
            }
        }
        let flipped = Tensor::new(vec![g.c_in, g.c_out, k, k], flipped)?;
        Some(conv2d_same(grad_out, &flipped, &vec![T::zero(); g.c_in])?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias,
    })
}

/// dW[co, (ci, ky, kx)] = sum over (b, y, x) of dY[b, co, y, x] * Xpad[b, ci, y + ky, x + kx],
/// computed per sample as a GEMM of dY against the unfolded input.
fn weight_grad<T: Real>(input: &[T], dy: &[T], g: &Geometry) -> Vec<T> {
    let k = g.k;
    let rows = g.c_in * k * k;
    let hw = g.h * g.w;
    let padded = pad_input(input, g);
    let (pw, ph) = (g.padded_w(), g.padded_h());
    let mut col = vec![T::zero(); rows * hw];
    let mut dw = vec![T::zero(); g.c_out * rows];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            let x_plane = &padded[(b * g.c_in + ci) * ph * pw..(b * g.c_in + ci + 1) * ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut col[r * hw..(r + 1) * hw];
                    for y in 0..g.h {
                        let src = (y + ky) * pw + kx;
                        dst[y * g.w..(y + 1) * g.w].copy_from_slice(&x_plane[src..src + g.w]);
                    }
                }
            }
        }
        let dy_b = &dy[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        T::gemm_acc(g.c_out, hw, rows, dy_b, &col, &mut dw);
    }
    dw
}

fn lane_sum<T: Real>(v: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for l in 0..LANES {
            acc[l] = acc[l] + c[l];
        }
    }
    for (l, &r) in chunks.remainder().iter().enumerate() {
        acc[l] = acc[l] + r;
    }
    acc.iter().copied().sum()
}
