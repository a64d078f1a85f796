//! Adam without weight decay, betas (0.9, 0.999), eps 1e-8.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators and step counter for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one Adam update to `params` (given as consecutive slices whose
    /// total length matches the state) using the flat gradient `grads`.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut [f64]>,
        grads: &[f64],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "gradient length {} does not match optimizer state {}",
                grads.len(),
                self.m.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        check_finite(grads)?;

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);

        let mut offset = 0;
        for slice in params {
            let end = offset + slice.len();
            if end > grads.len() {
                return Err(Error::config("parameter slices exceed gradient length"));
            }
            let g = &grads[offset..end];
            let m = &mut self.m[offset..end];
            let v = &mut self.v[offset..end];
            for i in 0..slice.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                slice[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
            offset = end;
        }
        if offset != grads.len() {
            return Err(Error::config("parameter slices shorter than gradient"));
        }
        Ok(())
    }
}

/// Sum of squares over a flat gradient.
pub fn grad_norm_sq(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum()
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::divergence(format!(
            "non-finite gradient {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut state = AdamState::new(3);
        let mut w = vec![0.5, -1.0, 2.0];
        state.update([w.as_mut_slice()], &[0.0; 3], 1e-3).unwrap();
        assert_eq!(w, vec![0.5, -1.0, 2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        let mut state = AdamState::new(1);
        let mut w = vec![0.0];
        state.update([w.as_mut_slice()], &[1.0], 1e-3).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + EPSILON);
        assert!((w[0] - expected).abs() < 1e-18, "{} vs {expected}", w[0]);
    }

    #[test]
    fn rejects_non_finite_gradient_and_bad_lr() {
        let mut state = AdamState::new(1);
        let mut w = vec![0.0];
        assert!(matches!(
            state.update([w.as_mut_slice()], &[f64::INFINITY], 1e-3),
            Err(Error::NumericDivergence { .. })
        ));
        assert!(state.update([w.as_mut_slice()], &[1.0], 0.0).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn grad_norm_sq_examples() {
        assert_eq!(grad_norm_sq(&[0.0, 0.0]), 0.0);
        assert_eq!(grad_norm_sq(&[3.0, 4.0]), 25.0);
        let concatenated: Vec<f64> = [vec![1.0, 1.0], vec![2.0]].concat();
        assert_eq!(grad_norm_sq(&concatenated), 6.0);
    }
}
