use super::{Real, Result, Tensor, TensorError};

/// Flat input index of the maximum of every pooling window.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first position in row-major order.
pub fn maxpool2x2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Shape(format!("max pooling needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        PoolIndices { input_shape: input.shape().to_vec(), argmax },
    ))
}

/// Routes each upstream gradient entry to its window's argmax.
pub fn maxpool2x2_backward<T: Real>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(TensorError::Shape(format!(
            "pooling gradient has {} entries, expected {}",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&indices.input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}
