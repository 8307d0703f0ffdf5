use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidDims(dims));
        }
        if n != data.len() {
            return Err(Error::DataLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, S::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, S::one())
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    /// Builds a tensor from `f64` values, rounding to the element type.
    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(
            dims.to_vec(),
            data.iter().map(|&v| S::from_f64_lossy(v)).collect(),
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Interprets the tensor as a matrix: leading dims are flattened into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.dims.last().expect("tensor has at least one dim");
        (self.data.len() / cols, cols)
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.contains(&0) {
            return Err(Error::DimMismatch {
                op: "reshape",
                left: self.dims,
                right: dims,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    /// Converts between element precisions.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?}[", S::NAME, self.dims)?;
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
