//! Plain tensor storage: shape plus row-major data.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LeapError, Result};
use crate::scalar::Scalar;

/// Row-major dense tensor. Rank 1 and rank 2 are the only shapes the encoder
/// needs; the invariant `product(shape) == data.len()` is enforced on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> TensorData<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LeapError::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        TensorData { shape, data: vec![F::zero(); numel] }
    }

    pub fn scalar(value: F) -> Self {
        TensorData { shape: vec![1], data: vec![value] }
    }

    /// Rank-1 tensor from a vector.
    pub fn vector(data: Vec<F>) -> Self {
        TensorData { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f64, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(normal.sample(rng)).expect("finite sample"))
            .collect();
        TensorData { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when interpreted as a matrix; rank-1 tensors are a
    /// single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> F {
        assert!(self.is_scalar(), "scalar_value() on tensor with shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast element type, e.g. `f64` weights to an `f32` latency model.
    pub fn cast<G: Scalar>(&self) -> TensorData<G> {
        TensorData {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().expect("finite")).expect("representable"))
                .collect(),
        }
    }
}
