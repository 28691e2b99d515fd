use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rank-1..3 tensor of 64-bit reals, row-major. Values are immutable
/// once the tensor is on a tape; gradients live on the tape, not here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadRank(shape));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeLenMismatch { shape, len: values.len() });
        }
        Ok(Tensor { shape, values, requires_grad: false })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v], requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], requires_grad: false }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values, requires_grad: false }
    }

    /// Build a rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::BadShape { op: "from_rows", shape: vec![r, c] });
        }
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Scalar contents of a shape-[1] tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape);
        self.values[0]
    }

    /// Row count for rank-2 tensors; a rank-1 tensor is a single row.
    pub fn n_rows(&self) -> usize {
        if self.rank() == 1 { 1 } else { self.shape[0] }
    }

    /// Column count for rank-1/2 tensors.
    pub fn n_cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.n_cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
