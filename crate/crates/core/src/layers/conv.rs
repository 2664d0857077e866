use rand::Rng;

use super::{ImageDims, LayerError};
use crate::tensor::{Scalar, ShapeDisplay, Tensor, TensorError};

/// Stride-1, zero-padded ("same") 2D convolution parameters.
///
/// `kernels` has shape `(K, K, C_in, C_out)`; `bias` has shape `(C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>) -> Result<Self, LayerError> {
        let &[k, k2, _, c_out] = kernels.shape() else {
            return Err(LayerError::InvalidKernel(format!(
                "expected (K, K, C_in, C_out), got {}",
                ShapeDisplay(kernels.shape())
            )));
        };
        if k != k2 || k % 2 == 0 {
            return Err(LayerError::InvalidKernel(format!(
                "kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        bias.expect_shape("conv bias", &[c_out])?;
        Ok(Self { kernels, bias })
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn he_uniform(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, LayerError> {
        let fan_in = kernel_size * kernel_size * in_channels;
        let bound = (6.0 / fan_in as f64).sqrt();
        let kernels = Tensor::from_fn(&[kernel_size, kernel_size, in_channels, out_channels], |_| {
            T::from_f64_lossy(rng.random_range(-bound..bound))
        });
        Self::new(kernels, Tensor::zeros(&[out_channels]))
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[3]
    }

    fn check_input(&self, op: &'static str, shape: &[usize]) -> Result<ImageDims, LayerError> {
        let dims = ImageDims::of(op, shape)?;
        if dims.c != self.in_channels() {
            return Err(TensorError::shape(
                op,
                format!("{} input channels", self.in_channels()),
                format!("{} in input {}", dims.c, ShapeDisplay(shape)),
            )
            .into());
        }
        Ok(dims)
    }
}

/// Patch matrix of shape `(N*H*W, K*K*C)`; columns ordered `(dy, dx, c)` to
/// match the kernel layout, zeros where the window leaves the image.
fn im2col<T: Scalar>(input: &[T], d: ImageDims, k: usize) -> Vec<T> {
    let pad = k / 2;
    let row_len = k * k * d.c;
    let mut cols = vec![T::zero(); d.n * d.h * d.w * row_len];
    for b in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                let row = ((b * d.h + y) * d.w + x) * row_len;
                for dy in 0..k {
                    let Some(iy) = (y + dy).checked_sub(pad).filter(|&iy| iy < d.h) else {
                        continue;
                    };
                    for dx in 0..k {
                        let Some(ix) = (x + dx).checked_sub(pad).filter(|&ix| ix < d.w) else {
                            continue;
                        };
                        let src = ((b * d.h + iy) * d.w + ix) * d.c;
                        let dst = row + (dy * k + dx) * d.c;
                        cols[dst..dst + d.c].copy_from_slice(&input[src..src + d.c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], d: ImageDims, k: usize) -> Vec<T> {
    let pad = k / 2;
    let row_len = k * k * d.c;
    let mut image = vec![T::zero(); d.n * d.h * d.w * d.c];
    for b in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                let row = ((b * d.h + y) * d.w + x) * row_len;
                for dy in 0..k {
                    let Some(iy) = (y + dy).checked_sub(pad).filter(|&iy| iy < d.h) else {
                        continue;
                    };
                    for dx in 0..k {
                        let Some(ix) = (x + dx).checked_sub(pad).filter(|&ix| ix < d.w) else {
                            continue;
                        };
                        let dst = ((b * d.h + iy) * d.w + ix) * d.c;
                        let src = row + (dy * k + dx) * d.c;
                        for (acc, &g) in image[dst..dst + d.c].iter_mut().zip(&cols[src..src + d.c]) {
                            *acc = *acc + g;
                        }
                    }
                }
            }
        }
    }
    image
}

/// `out[h, w, f] = bias[f] + sum_{dy, dx, c} padded[h + dy, w + dx, c] * kernel[dy, dx, c, f]`
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>, LayerError> {
    let d = p.check_input("conv2d_forward", input.shape())?;
    let k = p.kernel_size();
    let c_out = p.out_channels();
    let rows = d.n * d.h * d.w;
    let cols = im2col(input.data(), d, k);

    let mut out = Vec::with_capacity(rows * c_out);
    for _ in 0..rows {
        out.extend_from_slice(p.bias.data());
    }
    T::gemm(
        rows,
        k * k * d.c,
        c_out,
        &cols,
        false,
        p.kernels.data(),
        false,
        &mut out,
        true,
    );
    Ok(Tensor::from_parts(d.shape_with(d.h, d.w, c_out), out))
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGradients<T>, LayerError> {
    let (input_grad, kernels, bias) = conv2d_backward_impl(input, p, grad_out, true)?;
    Ok(ConvGradients {
        input: input_grad.expect("input gradient requested"),
        kernels,
        bias,
    })
}

/// `(input, kernels, bias)` gradients; the input one is optional.
pub(crate) type RawGradients<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Backward pass; the input gradient is skipped when `want_input` is false
/// (first layer of a network).
pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<RawGradients<T>, LayerError> {
    let d = p.check_input("conv2d_backward", input.shape())?;
    let k = p.kernel_size();
    let c_out = p.out_channels();
    grad_out.expect_shape("conv2d_backward", &d.shape_with(d.h, d.w, c_out))?;
    let rows = d.n * d.h * d.w;
    let patch = k * k * d.c;
    let g = grad_out.data();

    let mut grad_bias = vec![T::zero(); c_out];
    for row in g.chunks_exact(c_out) {
        for (acc, &v) in grad_bias.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }

    let cols = im2col(input.data(), d, k);
    let mut grad_kernels = vec![T::zero(); patch * c_out];
    T::gemm(patch, rows, c_out, &cols, true, g, false, &mut grad_kernels, false);

    let grad_input = if want_input {
        let mut grad_cols = vec![T::zero(); rows * patch];
        T::gemm(
            rows,
            c_out,
            patch,
            g,
            false,
            p.kernels.data(),
            true,
            &mut grad_cols,
            false,
        );
        Some(Tensor::from_parts(input.shape().to_vec(), col2im(&grad_cols, d, k)))
    } else {
        None
    };

    Ok((
        grad_input,
        Tensor::from_parts(p.kernels.shape().to_vec(), grad_kernels),
        Tensor::from_parts(vec![c_out], grad_bias),
    ))
}
