use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat weight storage with shape metadata. The unit that recovery operates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    shape: Vec<usize>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::config(format!(
                "parameter length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::divergence(format!(
                "non-finite parameter value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self { values, shape })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            values: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Raw entries. Writes bypass the finiteness check done on construction.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major matrix view; panics on non-2-D shapes, which never reach the model.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "matrix view of shape {:?}", self.shape);
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.values).expect("shape checked")
    }

    /// Concatenates vectors into one flat vector.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a ParameterVector>) -> ParameterVector {
        let values: Vec<f64> = parts
            .into_iter()
            .flat_map(|p| p.values.iter().copied())
            .collect();
        let n = values.len();
        ParameterVector {
            values,
            shape: vec![n],
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn distance_sq(&self, other: &ParameterVector) -> Result<f64> {
        self.check_same_len(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn check_same_len(&self, other: &ParameterVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::config(format!(
                "parameter shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Same values with a different shape of equal size.
    pub fn reshaped(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(self.values, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_non_finite() {
        assert!(matches!(
            ParameterVector::new(vec![1.0, 2.0], vec![3]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ParameterVector::new(vec![1.0, f64::NAN], vec![2]),
            Err(Error::NumericDivergence { .. })
        ));
    }

    #[test]
    fn matrix_view_is_row_major() {
        let p = ParameterVector::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let m = p.matrix();
        assert_eq!(m[[0, 2]], 3.0);
        assert_eq!(m[[1, 0]], 4.0);
    }

    #[test]
    fn concat_and_distance() {
        let a = ParameterVector::from_vec(vec![1.0, 1.0]).unwrap();
        let b = ParameterVector::from_vec(vec![2.0]).unwrap();
        let c = ParameterVector::concat([&a, &b]);
        assert_eq!(c.values(), &[1.0, 1.0, 2.0]);
        assert_eq!(c.norm_sq(), 6.0);
        assert!(a.distance_sq(&b).is_err());
    }
}
