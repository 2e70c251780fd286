//! Dense tensors: a shape plus flat row-major storage.
//!
//! Rank is arbitrary for storage (datasets keep images as `[H, W, 3]`), but
//! the tape kernels operate on matrices: rank-2 tensors directly, and rank-1
//! tensors viewed as a single row `[1, n]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape plus flat row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and matching flat data.
    ///
    /// # Panics
    /// Panics if the element count does not match the shape product; this is
    /// a programming error, not a runtime condition.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Rank-2 tensor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows in from_rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view `(rows, cols)`: rank-2 as-is, rank-1 as a single row.
    ///
    /// Errors on rank 0 and on rank ≥ 3; the tape kernels are matrix
    /// kernels and higher-rank storage must be reshaped first.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Domain {
                op: "dims2",
                detail: format!("expected rank 1 or 2, got shape {:?}", self.shape),
            }),
        }
    }

    /// Element at `(row, col)` under the [`dims2`](Self::dims2) view.
    pub fn at(&self, row: usize, col: usize) -> S {
        let (_, c) = self.dims2().expect("matrix view");
        self.data[row * c + col]
    }

    /// Reinterprets the same storage under a new shape of equal length.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(self.data.len(), expect, "reshape changes element count");
        self.shape = shape;
        self
    }

    /// True when every element is finite (no NaN / ±inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max)
    }

    /// Bitwise equality of shape and every element (NaN-safe, exact).
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank1_is_a_row_vector() {
        let t: Tensor = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        assert_eq!(t.dims2().unwrap(), (1, 3));
        assert_eq!(t.at(0, 2), 3.0);
    }

    #[test]
    fn rank3_has_no_matrix_view() {
        let t: Tensor = Tensor::zeros(vec![2, 2, 3]);
        assert!(t.dims2().is_err());
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a: Tensor = Tensor::scalar(0.0);
        let b: Tensor = Tensor::scalar(-0.0);
        assert!(!a.bit_eq(&b));
        assert_eq!(a, b); // PartialEq treats them as equal; bit_eq does not
    }
}
