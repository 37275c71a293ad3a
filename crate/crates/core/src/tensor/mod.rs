//! Minimal differentiable array substrate.
//!
//! [`Tensor`] is a plain row-major n-d value; [`Graph`] is an eager tape
//! that records every operation and replays it in reverse topological order
//! on [`Graph::backward`]. All arithmetic is `f64`.

mod graph;
pub(crate) mod kernels;

pub use graph::{grad_check, grad_check_multi, BnStats, Graph, Mode, Padding, Var};

use crate::error::{Error, Result};

/// Dense row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dim in {:?}", shape)));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Dimension(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset for a rank-4 `[B, H, W, C]` tensor.
    #[inline]
    pub fn at4(&self, b: usize, h: usize, w: usize, c: usize) -> f64 {
        let s = &self.shape;
        debug_assert_eq!(s.len(), 4);
        self.data[((b * s[1] + h) * s[2] + w) * s[3] + c]
    }

    /// Expect rank 4, returning `[B, H, W, C]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        if self.shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }
}

/// Concatenate rank-4 tensors along the batch axis.
pub fn concat_batch_tensors(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Domain("concat of zero tensors".into()));
    }
    let first = parts[0].dims4()?;
    let mut batch = 0;
    for p in parts {
        let d = p.dims4()?;
        if d[1..] != first[1..] {
            return Err(Error::Dimension(format!(
                "batch concat of mismatched shapes {:?} vs {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        batch += d[0];
    }
    let mut data = Vec::with_capacity(batch * first[1] * first[2] * first[3]);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[batch, first[1], first[2], first[3]], data)
}
