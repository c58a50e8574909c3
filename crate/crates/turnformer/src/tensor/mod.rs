//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Everything above this module is expressed in terms of [`Tensor`] values
//! and [`Tape`] operations. Tensors are immutable once created; recording a
//! computation on a tape and calling [`Tape::backward`] yields gradients for
//! every watched (`requires_grad`) leaf.

pub mod adam;
pub mod checkpoint;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar element type for tensor math.
///
/// Training runs use `f32`; gradient checks and oracle verification run in
/// `f64`. Random draws are always made in `f64` and cast, so the same seed
/// produces the same values in both precisions up to rounding.
pub trait Element:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Identifies a node on a specific tape instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub id: usize,
}

/// An immutable row-major 2-D tensor.
///
/// Carries an optional handle into the tape that produced it; detached
/// tensors (no handle) act as constants when fed to tape operations.
#[derive(Clone, Debug)]
pub struct Tensor<E> {
    data: Arc<Vec<E>>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    pub(crate) node: Option<NodeRef>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self {
            data: Arc::new(data),
            rows,
            cols,
            requires_grad: false,
            node: None,
        })
    }

    pub(crate) fn from_arc(data: Arc<Vec<E>>, rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            requires_grad: false,
            node: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![E::zero(); rows * cols]).unwrap()
    }

    pub fn full(rows: usize, cols: usize, v: E) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols]).unwrap()
    }

    pub fn scalar(v: E) -> Self {
        Self::from_vec(1, 1, vec![v]).unwrap()
    }

    /// Builds a tensor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Contract("ragged rows in tensor literal".into()));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub(crate) fn with_node(mut self, node: NodeRef, requires_grad: bool) -> Self {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn get(&self, r: usize, c: usize) -> E {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Detached copy of the value, dropping any tape handle.
    pub fn detach(&self) -> Self {
        Self {
            data: Arc::clone(&self.data),
            rows: self.rows,
            cols: self.cols,
            requires_grad: false,
            node: None,
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        )
        .unwrap()
    }

    /// Copies a contiguous row range into a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::Contract(format!(
                "row slice {}..{} out of range for {} rows",
                start, end, self.rows
            )));
        }
        Self::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Column-wise mean over all rows, as a 1-row tensor.
    pub fn mean_rows(&self) -> Result<Self> {
        if self.rows == 0 {
            return Err(Error::Contract("mean_rows on empty tensor".into()));
        }
        let inv = E::from_f64(1.0 / self.rows as f64);
        let mut out = vec![E::zero(); self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o = *o + *v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        Self::from_vec(1, self.cols, out)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(parts: &[&Tensor<E>]) -> Result<Self> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero tensors".into()))?
            .rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                if p.rows != rows {
                    return Err(Error::Dim {
                        op: "concat_cols",
                        lhs: vec![rows],
                        rhs: vec![p.rows],
                    });
                }
                data.extend_from_slice(p.row(r));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Index of the row maximum, ties broken toward the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Elementwise maximum absolute difference between two same-shape tensors.
pub fn max_abs_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
