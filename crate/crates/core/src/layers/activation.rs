use super::{vector_dims, LayerError};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `grad_out` where `x > 0`, zero elsewhere (including at `x == 0`).
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    grad_out.expect_shape("relu_backward", x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Max-shifted softmax over the last axis of a `(n)` or `(N, n)` tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    let (_, width, _) = vector_dims("softmax", logits.shape())?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| (z - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        for p in &mut out[start..] {
            *p = *p / total;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}
