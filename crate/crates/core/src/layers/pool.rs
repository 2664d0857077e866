use super::{ImageDims, LayerError};
use crate::tensor::{Scalar, Tensor};

/// For each output cell of a 2x2/stride-2 max pool, the flat index into the
/// input of the element that was selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolArgmax {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    indices: Vec<usize>,
}

impl PoolArgmax {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// 2x2 max pool with stride 2. Ties go to the lowest flat input index.
pub fn maxpool_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolArgmax), LayerError> {
    let d = ImageDims::of("maxpool_forward", input.shape())?;
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(LayerError::OddDimension {
            height: d.h,
            width: d.w,
        });
    }
    let (oh, ow) = (d.h / 2, d.w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(d.n * oh * ow * d.c);
    let mut indices = Vec::with_capacity(out.capacity());
    for b in 0..d.n {
        for y in 0..oh {
            for xo in 0..ow {
                for c in 0..d.c {
                    let at = |dy: usize, dx: usize| ((b * d.h + 2 * y + dy) * d.w + 2 * xo + dx) * d.c + c;
                    // Window offsets visited in increasing flat-index order.
                    let mut best = at(0, 0);
                    for idx in [at(0, 1), at(1, 0), at(1, 1)] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    indices.push(best);
                }
            }
        }
    }
    let output_shape = d.shape_with(oh, ow, d.c);
    Ok((
        Tensor::from_parts(output_shape.clone(), out),
        PoolArgmax {
            input_shape: input.shape().to_vec(),
            output_shape,
            indices,
        },
    ))
}

/// Routes each upstream gradient to the input position recorded in `argmax`.
pub fn maxpool_backward<T: Scalar>(argmax: &PoolArgmax, grad_out: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    grad_out.expect_shape("maxpool_backward", &argmax.output_shape)?;
    let mut grad = Tensor::zeros(&argmax.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.indices.iter().zip(grad_out.data()) {
        g[idx] = g[idx] + v;
    }
    Ok(grad)
}
