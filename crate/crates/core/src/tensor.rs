//! Dense row-major tensors of `f64`.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dense N-dimensional array stored row-major.
///
/// Every dimension is at least 1 and the buffer length always equals the
/// product of the shape. Images use the NCHW convention.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let t = Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        };
        assert!(t.shape.iter().all(|&d| d > 0));
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err("dims4", format!("expected NCHW tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Checks that `factor` can be broadcast against `self`: same rank, every
    /// dimension either 1 or equal to ours.
    pub fn broadcast_compatible(&self, factor: &Tensor) -> bool {
        factor.shape.len() == self.shape.len()
            && factor
                .shape
                .iter()
                .zip(&self.shape)
                .all(|(&f, &s)| f == 1 || f == s)
    }

    /// Elementwise product with a broadcastable factor.
    pub fn mul_broadcast(&self, factor: &Tensor) -> Result<Self> {
        if !self.broadcast_compatible(factor) {
            return shape_err(
                "mul_broadcast",
                format!("cannot broadcast {:?} onto {:?}", factor.shape, self.shape),
            );
        }
        if factor.shape == self.shape {
            return self.mul(factor);
        }
        let expanded = factor.expand_to(&self.shape)?;
        self.mul(&expanded)
    }

    /// Materializes a broadcastable tensor at the full target shape.
    pub fn expand_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape.len() != shape.len()
            || self
                .shape
                .iter()
                .zip(shape)
                .any(|(&f, &s)| f != 1 && f != s)
        {
            return shape_err(
                "expand_to",
                format!("cannot broadcast {:?} onto {:?}", self.shape, shape),
            );
        }
        let rank = shape.len();
        let mut src_strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            src_strides[d] = if self.shape[d] == 1 { 0 } else { acc };
            acc *= self.shape[d];
        }
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums `self` down to a broadcastable `shape` (adjoint of `expand_to`).
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        let target = Tensor::zeros(shape);
        if !self.broadcast_compatible(&target) {
            return shape_err(
                "reduce_to",
                format!("cannot reduce {:?} to {:?}", self.shape, shape),
            );
        }
        let rank = shape.len();
        let mut dst_strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            dst_strides[d] = if shape[d] == 1 { 0 } else { acc };
            acc *= shape[d];
        }
        let mut out = target;
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let off: usize = idx.iter().zip(&dst_strides).map(|(i, s)| i * s).sum();
            out.data[off] += v;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(out)
    }

    /// Copies rows `[start, start + count)` along the first axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let n = self.shape[0];
        if count == 0 || start + count > n {
            return shape_err(
                "slice_batch",
                format!("rows {start}..{} of {n}", start + count),
            );
        }
        let row = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self::new(&shape, self.data[start * row..(start + count) * row].to_vec())
    }

    /// Gathers rows by index along the first axis.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        if indices.is_empty() {
            return shape_err("gather_batch", "no rows selected");
        }
        let row = self.len() / n;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return shape_err("gather_batch", format!("row {i} of {n}"));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(&shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ... ({} more)", self.data.len() - SHOW)?;
        }
        write!(f, "]")
    }
}
