//! Forward and backward passes for the layer kinds used by the network.
//!
//! Image tensors are channel-last. Every op accepts a single sample
//! (`(H, W, C)` / `(n)`) or a batch with a leading axis
//! (`(N, H, W, C)` / `(N, n)`) and returns the same rank it was given.

mod activation;
mod conv;
mod dense;
mod dropout;
mod flatten;
mod pool;

use thiserror::Error;

use crate::tensor::{ShapeDisplay, TensorError};

pub use activation::{relu_backward, relu_forward, softmax};
pub(crate) use conv::conv2d_backward_impl;
pub use conv::{conv2d_backward, conv2d_forward, ConvGradients, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseGradients, DenseParams};
pub use dropout::{dropout_backward, dropout_forward, DropoutMask};
pub use flatten::{flatten_forward, unflatten};
pub use pool::{maxpool_backward, maxpool_forward, PoolArgmax};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("max pooling needs even height and width, got {height}x{width}")]
    OddDimension { height: usize, width: usize },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
}

/// `(N, H, W, C)` view of an image or image batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ImageDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub batched: bool,
}

impl ImageDims {
    pub fn of(op: &'static str, shape: &[usize]) -> Result<Self, LayerError> {
        match *shape {
            [h, w, c] => Ok(Self {
                n: 1,
                h,
                w,
                c,
                batched: false,
            }),
            [n, h, w, c] => Ok(Self {
                n,
                h,
                w,
                c,
                batched: true,
            }),
            _ => Err(TensorError::shape(op, "(H, W, C) or (N, H, W, C)", ShapeDisplay(shape)).into()),
        }
    }

    pub fn shape_with(&self, h: usize, w: usize, c: usize) -> Vec<usize> {
        if self.batched {
            vec![self.n, h, w, c]
        } else {
            vec![h, w, c]
        }
    }
}

/// `(N, features)` view of a vector or vector batch.
pub(crate) fn vector_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, bool), LayerError> {
    match *shape {
        [f] => Ok((1, f, false)),
        [n, f] => Ok((n, f, true)),
        _ => Err(TensorError::shape(op, "(n) or (N, n)", ShapeDisplay(shape)).into()),
    }
}
