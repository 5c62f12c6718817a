//! Real-valued latent tensors shared by every kernel.

use ndarray::{ArrayD, IxDyn, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
///
/// Construction checks that the payload length matches the shape and that
/// every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(ArrayD<f64>);

impl Latent {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidLatent(format!(
                "shape {shape:?} must have at least one dimension, all positive"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidLatent(format!(
                "payload has {} values, shape {shape:?} needs {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidLatent(format!("non-finite value at index {i}")));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| Error::InvalidLatent(e.to_string()))?;
        Ok(Latent(arr))
    }

    pub fn from_array(arr: ArrayD<f64>) -> Result<Self> {
        let shape = arr.shape().to_vec();
        Self::from_vec(&shape, arr.iter().copied().collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Latent(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Latent(ArrayD::from_elem(IxDyn(shape), value))
    }

    /// Standard normal draw of the given shape.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Latent(ArrayD::from_shape_vec(IxDyn(shape), data).expect("length matches shape"))
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn array(&self) -> &ArrayD<f64> {
        &self.0
    }

    pub fn into_array(self) -> ArrayD<f64> {
        self.0
    }

    /// Values in row-major order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidLatent("kernel produced a non-finite value".into()))
        }
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        self.ensure_same_shape(other)?;
        let out = Zip::from(&self.0)
            .and(&other.0)
            .map_collect(|&x, &y| a * x + b * y);
        Ok(Latent(out))
    }

    pub fn scale(&self, a: f64) -> Latent {
        Latent(self.0.mapv(|x| a * x))
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.axpby(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.axpby(1.0, other, -1.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent(self.0.mapv(f))
    }

    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.ensure_same_shape(other)?;
        Ok(Latent(Zip::from(&self.0).and(&other.0).map_collect(|&x, &y| f(x, y))))
    }

    pub fn max_abs_diff(&self, other: &Latent) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0f64, |m, &x, &y| m.max((x - y).abs())))
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.len() as f64
    }
}

impl From<Latent> for ArrayD<f64> {
    fn from(l: Latent) -> Self {
        l.0
    }
}
