//! Dense row-major tensors and the GEMM primitive the layers are built on.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite value at offset {offset}")]
    NonFinite { offset: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, expected: impl Display, actual: impl Display) -> Self {
        TensorError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

/// Element type for tensors. Training runs in `f32`; gradient checks run the
/// same code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = op(a) * op(b) (+ c)` on row-major buffers, where `op(a)` is
    /// `m x k` and `op(b)` is `k x n`. Buffer lengths are checked by the caller.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 fits every Scalar")
    }
}

/// Row/column strides for a row-major matrix, or its transpose.
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // `rows x cols` is the logical (post-op) shape.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_transposed);
                let (rsb, csb) = strides(k, n, b_transposed);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides address exactly the
                // m*k, k*n and m*n row-major (or transposed) regions.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Formats a shape the way layer tables print it: `(28, 28, 1)`, `(3136)`.
pub struct ShapeDisplay<'a>(pub &'a [usize]);

impl Display for ShapeDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Dense tensor, row-major (last axis fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting count mismatches, zero dimensions and
    /// non-finite values.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(TensorError::shape(
                "create_tensor",
                format!("{} elements for shape {}", expected, ShapeDisplay(shape)),
                format!("{} values", data.len()),
            ));
        }
        if let Some(offset) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { offset });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Construction for internal producers whose outputs are known to have
    /// the right length. Finiteness is the caller's responsibility.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; len])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize, TensorError> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(TensorError::shape(
                "index",
                format!("index within {}", ShapeDisplay(&self.shape)),
                format!("{index:?}"),
            ));
        }
        Ok(index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| acc * d + i))
    }

    pub fn get(&self, index: &[usize]) -> Result<T, TensorError> {
        Ok(self.data[self.offset(index)?])
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self, TensorError> {
        self.clone().into_reshaped(new_shape)
    }

    pub fn into_reshaped(mut self, new_shape: &[usize]) -> Result<Self, TensorError> {
        let count: usize = new_shape.iter().product();
        if new_shape.contains(&0) || count != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("shape {} ({count} elements)", ShapeDisplay(new_shape)),
            ));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    /// Standard product of rank-2 tensors `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        match (self.shape.as_slice(), other.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![T::zero(); m * n];
                T::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
                Ok(Tensor::from_parts(vec![m, n], out))
            }
            _ => Err(TensorError::shape(
                "matmul",
                format!("(m, k) x (k, n) with lhs {}", ShapeDisplay(&self.shape)),
                format!("rhs {}", ShapeDisplay(&other.shape)),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise sum; shapes must match.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.expect_shape("add", other.shape())?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        self.map(|v| v * factor)
    }

    /// Copies sample `i` out of a tensor whose leading axis is the batch.
    pub fn sample(&self, i: usize) -> Result<Tensor<T>, TensorError> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(TensorError::shape(
                "sample",
                format!("batch index < leading dim of {}", ShapeDisplay(&self.shape)),
                i,
            ));
        }
        let per = self.len() / self.shape[0];
        Ok(Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * per..(i + 1) * per].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::shape("stack", "at least one tensor", "none"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_shape("stack", t.shape())?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Converts precision (for example `f32` parameters into an `f64` check).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        )
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<(), TensorError> {
        if self.shape != shape {
            return Err(TensorError::shape(op, ShapeDisplay(&self.shape), ShapeDisplay(shape)));
        }
        Ok(())
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} [", ShapeDisplay(&self.shape))?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
