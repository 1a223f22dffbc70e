//! 2x2 transposed convolution with stride 2. Windows never overlap, so every
//! output pixel receives contributions from exactly one input pixel.

use super::{check_finite, ConvGrads, Real, Result, Tensor, TensorError};

fn dims<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias_len: usize) -> Result<[usize; 5]> {
    let (b, c_in, h, w) = input.dims4()?;
    let (wc_in, c_out, kh, kw) = weight.dims4()?;
    if (kh, kw) != (2, 2) {
        return Err(TensorError::Shape(format!("expected 2x2 kernel, got {kh}x{kw}")));
    }
    if wc_in != c_in {
        return Err(TensorError::Shape(format!(
            "input has {c_in} channels, transposed kernel expects {wc_in}"
        )));
    }
    if bias_len != c_out {
        return Err(TensorError::Shape(format!("bias has {bias_len} entries, expected {c_out}")));
    }
    Ok([b, c_in, c_out, h, w])
}

/// `weight` is laid out `C_in x C_out x 2 x 2`. Per sample, the four taps
/// of every output channel are one GEMM of the transposed weights against
/// the input planes, then interleaved into the output grid.
pub fn upconv2x2<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let [b, c_in, c_out, h, w] = dims(input, weight, bias.len())?;
    let (oh, ow, hw) = (2 * h, 2 * w, h * w);
    let x = input.data();
    let wt = weight.data();
    let rows = c_out * 4;
    let mut out = vec![T::zero(); b * c_out * oh * ow];
    let mut sub = vec![T::zero(); rows * hw];
    for bi in 0..b {
        for (r, plane) in sub.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[r / 4]);
        }
        T::gemm(rows, c_in, hw, (wt, [1, rows]), (&x[bi * c_in * hw..(bi + 1) * c_in * hw], [hw, 1]), &mut sub);
        for co in 0..c_out {
            let o = &mut out[(bi * c_out + co) * oh * ow..(bi * c_out + co + 1) * oh * ow];
            for tap in 0..4 {
                let (ky, kx) = (tap / 2, tap % 2);
                let plane = &sub[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                for y in 0..h {
                    let orow = &mut o[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    for (xx, &v) in plane[y * w..(y + 1) * w].iter().enumerate() {
                        orow[2 * xx + kx] = v;
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![b, c_out, oh, ow], out)?;
    check_finite(&out, "upconv2x2");
    Ok(out)
}

pub fn upconv2x2_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [b, c_in, c_out, h, w] = dims(input, weight, weight.shape()[1])?;
    let (oh, ow, hw) = (2 * h, 2 * w, h * w);
    if grad_out.shape() != [b, c_out, oh, ow] {
        return Err(TensorError::Shape(format!(
            "upstream gradient {:?} does not match transposed conv output",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();
    let rows = c_out * 4;

    let mut bias = vec![T::zero(); c_out];
    let mut dw = vec![T::zero(); c_in * rows];
    let mut dx = vec![T::zero(); b * c_in * hw];
    let mut sub = vec![T::zero(); rows * hw];
    for bi in 0..b {
        // De-interleave dY into [co][tap][h*w] so every tap is contiguous.
        for co in 0..c_out {
            let src = &dy[(bi * c_out + co) * oh * ow..(bi * c_out + co + 1) * oh * ow];
            for tap in 0..4 {
                let (ky, kx) = (tap / 2, tap % 2);
                let dst = &mut sub[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                for y in 0..h {
                    let srow = &src[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                        *d = srow[2 * xx + kx];
                    }
                }
            }
            bias[co] = bias[co] + sub[co * 4 * hw..(co + 1) * 4 * hw].iter().copied().sum::<T>();
        }
        let xb = &x[bi * c_in * hw..(bi + 1) * c_in * hw];
        T::gemm(c_in, hw, rows, (xb, [hw, 1]), (&sub, [1, hw]), &mut dw);
        T::gemm(c_in, rows, hw, (wt, [rows, 1]), (&sub, [hw, 1]), &mut dx[bi * c_in * hw..(bi + 1) * c_in * hw]);
    }
    Ok(ConvGrads {
        input: Some(Tensor::new(input.shape().to_vec(), dx)?),
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias,
    })
}
