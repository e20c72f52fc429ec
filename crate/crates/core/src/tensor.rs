//! Dense row-major tensors and flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SflError};

/// Dense row-major `f64` array. The leading dimension is the batch axis
/// wherever a tensor carries samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(SflError::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SflError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SflError::InvalidTensor(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Shape and length must agree; finiteness is the caller's concern.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
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

    /// Size of the leading axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per sample (product of all but the leading axis).
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SflError::InvalidTensor(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[index * len..(index + 1) * len]
    }

    pub fn sample_mut(&mut self, index: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[index * len..(index + 1) * len]
    }

    /// Gathers samples along the leading axis.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }
}

/// Flat parameter (or gradient) vector in the canonical layout: layers in
/// sequence, weights before biases, each row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + scale * other`
    pub fn add_scaled(&self, other: &ParamVector, scale: f64) -> ParamVector {
        ParamVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    pub fn cosine(&self, other: &ParamVector) -> Option<f64> {
        let denom = self.norm() * other.norm();
        if denom == 0.0 || !denom.is_finite() {
            None
        } else {
            Some((self.dot(other) / denom).clamp(-1.0, 1.0))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Plain SGD: `params - eta * grads`.
pub fn sgd_step(params: &ParamVector, grads: &ParamVector, eta: f64) -> Result<ParamVector> {
    if params.len() != grads.len() {
        return Err(SflError::LengthMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    Ok(params.add_scaled(grads, -eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_tensors() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 1], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn select_gathers_rows() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s = t.select(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
    }

    #[test]
    fn sgd_examples() {
        let p = ParamVector(vec![1.0, 2.0]);
        assert_eq!(
            sgd_step(&p, &ParamVector(vec![0.0, 0.0]), 0.1).unwrap(),
            ParamVector(vec![1.0, 2.0])
        );
        assert_eq!(
            sgd_step(&p, &ParamVector(vec![1.0, 1.0]), 0.5).unwrap(),
            ParamVector(vec![0.5, 1.5])
        );
        assert_eq!(sgd_step(&p, &ParamVector(vec![7.0, -3.0]), 0.0).unwrap(), p);
        assert!(sgd_step(&p, &ParamVector(vec![1.0]), 0.1).is_err());
    }

    #[test]
    fn cosine_handles_zero() {
        let a = ParamVector(vec![1.0, 0.0]);
        assert_eq!(a.cosine(&ParamVector(vec![0.0, 0.0])), None);
        assert_eq!(a.cosine(&ParamVector(vec![0.0, 2.0])), Some(0.0));
    }
}
