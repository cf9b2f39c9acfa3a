use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_shape, Error, Result};

/// A real-valued `(channels, height, width)` array. Houses noisy latents,
/// noise samples and noise predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor(Array3<f64>);

impl LatentTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("latent tensor has non-finite entries".into()));
        }
        Ok(Self(data))
    }

    pub fn from_vec(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        let arr = Array3::from_shape_vec(shape, data).map_err(|_| Error::ShapeMismatch {
            expected: vec![shape.0, shape.1, shape.2],
            got: vec![len],
        })?;
        Self::new(arr)
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self(Array3::zeros(shape))
    }

    pub fn filled(shape: (usize, usize, usize), value: f64) -> Self {
        Self(Array3::from_elem(shape, value))
    }

    /// Standard normal draws in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Self {
        Self(Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal)))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub(crate) fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        ensure_shape(&[a.0, a.1, a.2], &[b.0, b.1, b.2])
    }

    /// `a * self + b * other`, elementwise.
    pub(crate) fn lincomb(&self, a: f64, other: &LatentTensor, b: f64) -> Result<LatentTensor> {
        self.ensure_same_shape(other)?;
        let out = Zip::from(&self.0)
            .and(&other.0)
            .map_collect(|&x, &y| a * x + b * y);
        Ok(LatentTensor(out))
    }

    #[cfg(test)]
    pub(crate) fn scale(&self, a: f64) -> LatentTensor {
        LatentTensor(self.0.mapv(|x| a * x))
    }
}
