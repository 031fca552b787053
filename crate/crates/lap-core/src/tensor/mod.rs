//! Dense f64 tensors and a recorded-operation tape for reverse-mode
//! differentiation.
//!
//! Everything downstream (models, training, oracles) moves through the
//! [`Tensor`] type: a flat row-major `Vec<f64>` plus shape metadata. Ops are
//! recorded on a [`Tape`](tape::Tape) so that one backward pass yields exact
//! gradients for every parameter leaf.

pub mod batchnorm;
pub mod gradcheck;
pub mod kernels;
pub mod tape;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value ({value}) at index {index} entering {op}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data length and
    /// that every entry is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterprets the data under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    op,
                    index: i,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Row count when viewed as `[rows, cols]`; the first axis for higher
    /// ranks (batch dimension).
    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&1)
    }

    /// Elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Squared Euclidean norm of each leading-axis row.
    pub fn row_sq_norms(&self) -> Vec<f64> {
        let d = self.row_len();
        self.data
            .chunks_exact(d.max(1))
            .map(|row| row.iter().map(|v| v * v).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn row_sq_norms_match_manual_loop() {
        let t = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.row_sq_norms(), vec![25.0, 5.0]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
