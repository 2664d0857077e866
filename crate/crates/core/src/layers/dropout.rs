use rand::Rng;

use super::LayerError;
use crate::tensor::{Scalar, Tensor};

/// Keep-mask (entries exactly 0 or 1) from one dropout forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Scalar = f32> {
    pub mask: Tensor<T>,
    pub rate: f64,
}

impl<T: Scalar> DropoutMask<T> {
    fn keep_scale(&self) -> T {
        T::from_f64_lossy(1.0 / (1.0 - self.rate))
    }
}

fn check_rate(rate: f64) -> Result<(), LayerError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(LayerError::InvalidRate(rate))
    }
}

/// Inverted dropout. At inference (or `rate == 0`) the output is the input
/// and the mask is all ones; in training each entry is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, DropoutMask<T>), LayerError> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        let mask = DropoutMask {
            mask: Tensor::filled(x.shape(), T::one()),
            rate,
        };
        return Ok((x.clone(), mask));
    }
    let mask = DropoutMask {
        mask: Tensor::from_fn(x.shape(), |_| if rng.random_bool(rate) { T::zero() } else { T::one() }),
        rate,
    };
    let y = apply(&mask, x)?;
    Ok((y, mask))
}

pub fn dropout_backward<T: Scalar>(mask: &DropoutMask<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    check_rate(mask.rate)?;
    apply(mask, grad_out)
}

fn apply<T: Scalar>(mask: &DropoutMask<T>, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    x.expect_shape("dropout", mask.mask.shape())?;
    if mask.rate == 0.0 {
        return Ok(Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(mask.mask.data()).map(|(&v, &m)| v * m).collect(),
        ));
    }
    let scale = mask.keep_scale();
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(mask.mask.data())
            .map(|(&v, &m)| v * m * scale)
            .collect(),
    ))
}
