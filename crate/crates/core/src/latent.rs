//! Dense latent tensors and conditioning vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::normal_f32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("latent shape must be positive in every dimension, got {0:?}")]
    ZeroDim([usize; 4]),
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

/// Real tensor laid out row-major as `(frames, height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self, LatentError> {
        if shape.contains(&0) {
            return Err(LatentError::ZeroDim(shape));
        }
        let expected = shape.iter().product();
        if data.len() != expected {
            return Err(LatentError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LatentError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    /// Skips the finiteness scan. Used for intermediate model outputs, which
    /// callers check explicitly where NaN matters.
    pub(crate) fn from_raw(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized latent {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Unit-normal entries, each rounded to `f32`.
    pub fn standard_normal(shape: [usize; 4], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape, (0..n).map(|_| normal_f32(rng)).collect())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    /// Number of `(frame, row, col)` positions, i.e. elements per channel.
    pub fn voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
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

    pub fn index(&self, f: usize, h: usize, w: usize, c: usize) -> usize {
        ((f * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), LatentError> {
        if self.shape != other.shape {
            return Err(LatentError::ShapeMismatch(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Self, b: f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Self::from_raw(self.shape, data)
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x - y).collect();
        Self::from_raw(self.shape, data)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Round every entry to the nearest `f32`.
    pub fn quantize_f32(&self) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| v as f32 as f64).collect())
    }

    pub fn is_f32_exact(&self) -> bool {
        self.data.iter().all(|&v| (v as f32 as f64).to_bits() == v.to_bits())
    }
}

/// Opaque stand-in for a text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conditioning(pub Vec<f64>);

impl Conditioning {
    /// The null conditioning used for the unconditional guidance branch.
    pub fn null(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn standard_normal(dim: usize, rng: &mut impl Rng) -> Self {
        Self((0..dim).map(|_| normal_f32(rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(matches!(
            LatentVideo::new([1, 0, 1, 1], vec![]),
            Err(LatentError::ZeroDim(_))
        ));
        assert!(matches!(
            LatentVideo::new([1, 1, 1, 2], vec![0.0]),
            Err(LatentError::DataLength { .. })
        ));
        assert_eq!(
            LatentVideo::new([1, 1, 1, 2], vec![0.0, f64::NAN]),
            Err(LatentError::NonFinite(1))
        );
    }

    #[test]
    fn row_major_indexing() {
        let z = LatentVideo::zeros([2, 3, 4, 5]);
        assert_eq!(z.index(0, 0, 0, 1), 1);
        assert_eq!(z.index(0, 0, 1, 0), 5);
        assert_eq!(z.index(0, 1, 0, 0), 20);
        assert_eq!(z.index(1, 0, 0, 0), 60);
        assert_eq!(z.voxels(), 24);
    }

    #[test]
    fn normal_draws_are_f32_exact() {
        let z = LatentVideo::standard_normal([2, 2, 2, 2], &mut seeded(3));
        assert!(z.is_f32_exact());
        let q = LatentVideo::new([1, 1, 1, 1], vec![0.1]).unwrap();
        assert!(!q.is_f32_exact());
        assert!(q.quantize_f32().is_f32_exact());
    }
}
