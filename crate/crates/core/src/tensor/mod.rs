//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Tensor`] is plain storage that persists across passes (parameters,
//! inputs, BN buffers). A [`Graph`] records one forward pass: leaves are
//! copied in, every op appends a node, and [`Graph::backward`] walks the
//! nodes in reverse once. Gradients are read back per leaf and accumulated
//! into the owning tensor with [`Tensor::accumulate_grad`].

mod graph;
pub(crate) mod kernels;

pub use graph::{BatchStats, BnForward, Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Vec::new(), value)
    }

    /// Marks the tensor as a differentiable leaf and allocates a zeroed
    /// gradient accumulator (or drops it when `flag` is false).
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        self.grad = flag.then(|| vec![0.0; self.data.len()]);
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let Some(grad) = self.grad.as_mut() else {
            return Err(Error::Input(
                "accumulate_grad on a tensor without requires_grad".into(),
            ));
        };
        if delta.len() != grad.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!(
                    "gradient of length {} for shape {:?}",
                    delta.len(),
                    self.shape
                ),
            ));
        }
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.set_requires_grad(self.requires_grad);
        Ok(t)
    }

    /// Contiguous slice `[start, start+len)` along the leading axis.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Tensor> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice_outer", "cannot slice a rank-0 tensor"))?;
        if start + len > outer {
            return Err(Error::Index {
                what: "leading axis",
                index: start + len,
                bound: outer,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(
            shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        )
    }

    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                "argmax_rows",
                format!("expected rank 2, got {:?}", self.shape),
            ));
        }
        let k = self.shape[1];
        Ok(self.data.chunks(k).map(argmax_lowest).collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
