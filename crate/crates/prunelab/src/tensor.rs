//! Dense row-major f32 tensors.
//!
//! Values are stored in row-major order so that serialized checkpoints are
//! byte-identical across platforms. Reductions that feed training decisions
//! accumulate in f64.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dims {dims:?} require {expected} values, got {actual}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension extents must be positive, got {dims:?}")]
    ZeroExtent { dims: Vec<usize> },
    #[error("expected rank-{expected} tensor, got dims {dims:?}")]
    RankMismatch { expected: usize, dims: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("degenerate input: zero vector")]
    ZeroVector,
}

/// Dense tensor of 32-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { dims });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: data.len(),
                dims,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Number of rows when interpreted as a batch: first extent.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Elements per row: product of the trailing extents.
    pub fn row_len(&self) -> usize {
        self.dims[1..].iter().product::<usize>().max(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn expect_rank(&self, rank: usize) -> Result<(), TensorError> {
        if self.rank() != rank {
            return Err(TensorError::RankMismatch {
                expected: rank,
                dims: self.dims.clone(),
            });
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { index }),
            None => Ok(()),
        }
    }
}

/// Normalize a rank-1 vector to unit Euclidean length.
///
/// The norm is accumulated in f64. A zero vector is a degenerate input; the
/// caller decides whether to skip the sample or abort.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor, TensorError> {
    v.expect_rank(1)?;
    let norm = l2_norm(v.data());
    if norm == 0.0 {
        return Err(TensorError::ZeroVector);
    }
    let data = v.data().iter().map(|&x| (x as f64 / norm) as f32).collect();
    Ok(Tensor::vector(data))
}

pub(crate) fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}
