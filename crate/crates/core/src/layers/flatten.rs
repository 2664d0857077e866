use super::{ImageDims, LayerError};
use crate::tensor::{Scalar, Tensor};

/// `(H, W, C) -> (H*W*C)` (or per sample for a batch), keeping row-major
/// channel-last order: `out[(h*W + w)*C + c] = x[h, w, c]`.
pub fn flatten_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    let d = ImageDims::of("flatten_forward", x.shape())?;
    let features = d.h * d.w * d.c;
    let shape = if d.batched { vec![d.n, features] } else { vec![features] };
    Ok(x.reshape(&shape)?)
}

/// Inverse of [`flatten_forward`]: restores the original image shape.
pub fn unflatten<T: Scalar>(x: &Tensor<T>, image_shape: &[usize]) -> Result<Tensor<T>, LayerError> {
    Ok(x.reshape(image_shape)?)
}
