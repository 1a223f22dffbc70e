use super::{Real, Result, Tensor, TensorError};

/// Concatenates along the channel axis, `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(TensorError::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ha * wa;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bi in 0..ba {
        out.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Tensor::new(vec![ba, ca + cb, ha, wa], out)
}

/// Inverse of [`concat_channels`]: the first `c_a` channels go to the first tensor.
pub fn split_channels<T: Real>(t: &Tensor<T>, c_a: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = t.dims4()?;
    if c_a == 0 || c_a >= c {
        return Err(TensorError::Shape(format!("cannot split {c} channels at {c_a}")));
    }
    let hw = h * w;
    let c_b = c - c_a;
    let mut first = Vec::with_capacity(b * c_a * hw);
    let mut second = Vec::with_capacity(b * c_b * hw);
    for bi in 0..b {
        let s = &t.data()[bi * c * hw..(bi + 1) * c * hw];
        first.extend_from_slice(&s[..c_a * hw]);
        second.extend_from_slice(&s[c_a * hw..]);
    }
    Ok((Tensor::new(vec![b, c_a, h, w], first)?, Tensor::new(vec![b, c_b, h, w], second)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_layout() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 2, 2]);
        assert_eq!(&c.data()[..4], &a.data()[..4]);
        let (ga, gb) = split_channels(&c, 2).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 1, 2, 4]);
        assert!(matches!(concat_channels(&a, &b), Err(TensorError::Shape(_))));
    }
}
