//! Dense row-major f64 tensor.
//!
//! Everything in the toolkit (images, feature maps, parameters, Jacobians,
//! Gram matrices) travels through this one type. It is deliberately thin:
//! shape plus flat data, with the layer kernels working on raw slices.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                location: "Tensor::new".into(),
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    /// Reinterprets the data under a new shape of equal volume.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                location: "Tensor::reshaped".into(),
                expected: format!("volume {}", self.data.len()),
                got: format!("shape {shape:?} (volume {n})"),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Root mean square over all entries; 0 for an empty tensor.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.data.iter().map(|v| v * v).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// Leading dimension, used as the batch size throughout.
    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }

    /// Volume of one sample (everything after the leading dimension).
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Borrow sample `i` of a batched tensor as a flat slice.
    pub fn sample(&self, i: usize) -> &[f64] {
        let m = self.sample_len();
        &self.data[i * m..(i + 1) * m]
    }

    /// Copies sample `i` into a standalone tensor with leading dim 1.
    pub fn sample_tensor(&self, i: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.sample(i).to_vec(),
        }
    }

    /// Gathers the given sample indices into a new batch (row-major copy).
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let m = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor { shape, data }
    }
}

/// Max-abs difference between two equally sized tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
