//! Dense row-major tensors. Rank 0 (scalar), 1 and 2 cover every shape this
//! model needs. Data is shared behind an `Arc` so tape nodes can keep cheap
//! snapshots of forward values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Identifies the tape node that produced a tensor, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_id: u64,
    pub index: usize,
}

/// A dense row-major tensor over `R`.
#[derive(Debug, Clone)]
pub struct Tensor<R: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<R>>,
    requires_grad: bool,
    pub(crate) node: Option<NodeRef>,
}

impl<R: Scalar> Tensor<R> {
    /// Build a tensor from a flat row-major buffer.
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![R::zero(); numel]),
            requires_grad: false,
            node: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            requires_grad: false,
            node: None,
        }
    }

    /// Rank-1 vector.
    pub fn vector(values: Vec<R>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: Arc::new(values),
            requires_grad: false,
            node: None,
        }
    }

    /// Rank-2 tensor from rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(height * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::ShapeMismatch {
                    op: "tensor_from_rows",
                    lhs: vec![width],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[height, width], data)
    }

    /// Rank-1 one-hot vector with a single 1 at `index`.
    pub fn one_hot(width: usize, index: usize) -> Result<Self> {
        if index >= width {
            return Err(Error::IndexOutOfRange {
                op: "one_hot",
                index,
                bound: width,
            });
        }
        let mut data = vec![R::zero(); width];
        data[index] = R::one();
        Ok(Tensor::vector(data))
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

    pub fn data(&self) -> &[R] {
        &self.data
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> Result<R> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "tensor_item",
                lhs: self.shape.clone(),
                rhs: vec![1],
            });
        }
        Ok(self.data[0])
    }

    /// Element of a rank-2 tensor.
    pub fn get2(&self, row: usize, col: usize) -> R {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row_slice(&self, row: usize) -> &[R] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[row * w..(row + 1) * w]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark this tensor as a differentiable leaf (model parameter).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Copy of this tensor detached from any tape.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mutable access for in-place parameter updates. Clones the buffer only
    /// if some tape node still shares it.
    pub fn data_mut(&mut self) -> &mut [R] {
        let buf: &mut Vec<R> = Arc::make_mut(&mut self.data);
        buf.as_mut_slice()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<R>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }
}
