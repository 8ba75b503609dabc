//! Channel-major image tensors.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A `channels x height x width` array of f64 values. Pixel data lives in
/// `[0, 1]`; diffusion latents use the same container but are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn constant(shape: (usize, usize, usize), value: f64) -> Self {
        Self {
            data: Array3::from_elem(shape, value),
        }
    }

    /// Fill from a generator over `(channel, y, x)`.
    pub fn from_fn(
        shape: (usize, usize, usize),
        f: impl Fn((usize, usize, usize)) -> f64,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn(shape, f),
        }
    }

    /// Standard-normal draws in row-major order, deterministic per rng.
    pub fn standard_normal(shape: (usize, usize, usize), rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        t
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean squared difference against another tensor of the same shape.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let n = self.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    /// Clamp every value into `[0, 1]`.
    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Left-right mirror.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        out.data.invert_axis(ndarray::Axis(2));
        out
    }
}
