//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the rhythm encoder and its heads need:
//! matmul, bias/elementwise arithmetic, masked row softmax, layer norm,
//! GELU/ReLU, embedding lookup, dropout, masked mean pooling and
//! cross-entropy, plus slicing/concatenation plumbing. [`Graph`] records a
//! tape of these ops; [`Graph::backward`] accumulates chain-rule gradients
//! for every leaf created with [`Graph::param`].

pub mod adam;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, op_suite, OpCheck};
pub use graph::{Graph, Var};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} operand, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor shape {shape:?} implies {expected} values, got {got}")]
    BadConstruction {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("token id {id} out of range for embedding table with {vocab} rows")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("dropout rate {rate} outside [0, 1)")]
    BadDropoutRate { rate: f64 },
    #[error("pooling mask selects no positions for batch row {row}")]
    EmptyPoolGroup { row: usize },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("class index {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("optimizer state mismatch at tensor {index}: param {param:?} vs state {state:?}")]
    OptimizerShape {
        index: usize,
        param: Vec<usize>,
        state: Vec<usize>,
    },
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::BadConstruction {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-1 scalar wrapper, shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::BadRank {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let c = self.shape[1];
        self.data[i * c + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rank-2 transpose, materialized.
    pub fn transposed(&self) -> Result<Self, TensorError> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
