//! Dense CHW tensors shared by the geometry primitives and the autodiff graph.
//!
//! Values are stored row-major as `data[(c * h + y) * w + x]`. Most fields in
//! this crate are 3-D (channels, rows, columns); convolution weights are 4-D
//! and reductions produce `[1, 1, 1]` scalars.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type for all numeric work. `f32` is the production type; `f64` is
/// used by the finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for writing literal constants in generic numeric code.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Immutable dense tensor. Cloning is cheap (shared buffer).
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn chw(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![c, h, w], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1, 1, 1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self {
            shape: vec![c, h, w],
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel count of a 3-D tensor.
    pub fn c(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[0]
    }

    pub fn h(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[1]
    }

    pub fn w(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[2]
    }

    pub fn is_chw(&self) -> bool {
        self.shape.len() == 3
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Extract the owned buffer, cloning only if it is shared.
    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Single element of a `[1,1,1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for &v in self.data.iter() {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum: T = self.data.iter().copied().sum();
        sum / T::from_f64(self.data.len() as f64)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .data
            .iter()
            .map(|&v| U::from_f64(Scalar::to_f64(v)))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }
}

/// Convenience for tests and oracles.
pub fn tensor1<T: Scalar>(row: &[T]) -> Tensor<T> {
    Tensor::chw(1, 1, row.len(), row.to_vec()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_fn(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f32);
        assert_eq!(t.at3(1, 2, 3), 123.0);
        assert_eq!(t.data()[23], 123.0);
    }

    #[test]
    fn cast_round_trip() {
        let t = tensor1(&[1.5f32, -2.25, 0.0]);
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.5, -2.25, 0.0]);
    }
}
