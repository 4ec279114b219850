//! Flat parameter vectors, the unit every protocol and compressor works on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A flat vector of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(n_params: usize) -> Self {
        Self { values: vec![0.0; n_params] }
    }

    /// Wraps raw values, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite parameter at index {i}"
            )));
        }
        Ok(Self { values })
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self + scale * other`, checked for matching lengths.
    pub fn add_scaled(&mut self, other: &ParameterVector, scale: f64) -> Result<()> {
        if other.n_params() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                actual: other.n_params(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector> {
        if other.n_params() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                actual: other.n_params(),
            });
        }
        Ok(ParameterVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(ParameterVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParameterVector::new(vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn add_scaled_checks_length() {
        let mut a = ParameterVector::zeros(3);
        let b = ParameterVector::zeros(4);
        assert!(matches!(
            a.add_scaled(&b, 1.0),
            Err(Error::DimensionMismatch { expected: 3, actual: 4 })
        ));
    }

    #[test]
    fn norms() {
        let v = ParameterVector::new(vec![3.0, -4.0]).unwrap();
        assert_eq!(v.l2_norm(), 5.0);
        assert_eq!(v.linf_norm(), 4.0);
    }
}
