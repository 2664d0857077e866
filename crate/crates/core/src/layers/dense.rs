use rand::Rng;

use super::{vector_dims, LayerError};
use crate::tensor::{Scalar, ShapeDisplay, Tensor, TensorError};

/// Fully connected layer: `weights` is `(n_in, n_out)`, `bias` is `(n_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self, LayerError> {
        let &[_, n_out] = weights.shape() else {
            return Err(TensorError::shape("dense weights", "(n_in, n_out)", ShapeDisplay(weights.shape())).into());
        };
        bias.expect_shape("dense bias", &[n_out])?;
        Ok(Self { weights, bias })
    }

    /// He-uniform weights (bound `sqrt(6 / n_in)`), zero bias.
    pub fn he_uniform(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Result<Self, LayerError> {
        let bound = (6.0 / n_in as f64).sqrt();
        let weights = Tensor::from_fn(&[n_in, n_out], |_| T::from_f64_lossy(rng.random_range(-bound..bound)));
        Self::new(weights, Tensor::zeros(&[n_out]))
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    fn check_input(&self, op: &'static str, shape: &[usize]) -> Result<(usize, bool), LayerError> {
        let (n, features, batched) = vector_dims(op, shape)?;
        if features != self.inputs() {
            return Err(
                TensorError::shape(op, format!("{} input features", self.inputs()), ShapeDisplay(shape)).into(),
            );
        }
        Ok((n, batched))
    }
}

/// `y = x^T W + b`, row by row for batches.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>, LayerError> {
    let (n, batched) = p.check_input("dense_forward", x.shape())?;
    let n_out = p.outputs();
    let mut out = Vec::with_capacity(n * n_out);
    for _ in 0..n {
        out.extend_from_slice(p.bias.data());
    }
    T::gemm(
        n,
        p.inputs(),
        n_out,
        x.data(),
        false,
        p.weights.data(),
        false,
        &mut out,
        true,
    );
    let shape = if batched { vec![n, n_out] } else { vec![n_out] };
    Ok(Tensor::from_parts(shape, out))
}

/// `grad_W = outer(x, grad_out)`, `grad_b = grad_out`, `grad_x = W grad_out`,
/// each summed over the batch when the input is batched.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &DenseParams<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGradients<T>, LayerError> {
    let (n, batched) = p.check_input("dense_backward", x.shape())?;
    let (n_in, n_out) = (p.inputs(), p.outputs());
    let expected = if batched { vec![n, n_out] } else { vec![n_out] };
    grad_out.expect_shape("dense_backward", &expected)?;
    let g = grad_out.data();

    let mut grad_w = vec![T::zero(); n_in * n_out];
    T::gemm(n_in, n, n_out, x.data(), true, g, false, &mut grad_w, false);

    let mut grad_b = vec![T::zero(); n_out];
    for row in g.chunks_exact(n_out) {
        for (acc, &v) in grad_b.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }

    let mut grad_x = vec![T::zero(); n * n_in];
    T::gemm(n, n_out, n_in, g, false, p.weights.data(), true, &mut grad_x, false);

    Ok(DenseGradients {
        input: Tensor::from_parts(x.shape().to_vec(), grad_x),
        weights: Tensor::from_parts(vec![n_in, n_out], grad_w),
        bias: Tensor::from_parts(vec![n_out], grad_b),
    })
}
