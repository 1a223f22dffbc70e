use super::{Real, Result, Tensor, TensorError};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.clear_grad();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(TensorError::Shape(format!(
            "relu gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_and_gates() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 2.0, -3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        let g = relu_backward(&x, &Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn zero_input_blocks_gradient() {
        let x = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let g = relu_backward(&x, &Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }
}
