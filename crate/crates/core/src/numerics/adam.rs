//! Adam over flat parameter vectors with standard bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self::with_betas(dim, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update in place. `params` and `grads` must match the
    /// dimension the state was created with.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} entries, got params {} grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = [1.0, -2.0];
        st.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = [1.0, -2.0];
        st.step(&mut p, &[1.0, -1.0]).unwrap();
        let m_before = st.m.clone();
        let v_before = st.v.clone();
        st.step(&mut p, &[0.0, 0.0]).unwrap();
        for (after, before) in st.m.iter().zip(&m_before) {
            assert!((after - before * 0.9).abs() < 1e-15);
        }
        for (after, before) in st.v.iter().zip(&v_before) {
            assert!((after - before * 0.999).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut st = AdamState::with_betas(3, 0.05, 0.9, 0.999, 1e-12);
        let mut p = [0.0, 0.0, 0.0];
        st.step(&mut p, &[3.0, -0.01, 0.5]).unwrap();
        for (x, g) in p.iter().zip([3.0_f64, -0.01, 0.5]) {
            assert!((x + 0.05 * g.signum()).abs() < 1e-6, "{x} vs {}", -0.05 * g.signum());
        }
    }

    /// Scalar descent oracle: run Adam on f(x) = x^2 starting at 1.
    #[test]
    fn descends_quadratic_to_near_zero() {
        let mut st = AdamState::new(1, 0.1);
        let mut p = [1.0];
        for _ in 0..100 {
            let g = [2.0 * p[0]];
            st.step(&mut p, &g).unwrap();
        }
        assert!(p[0].abs() < 0.1, "ended at {}", p[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = [0.0; 3];
        assert!(st.step(&mut p, &[0.0; 3]).is_err());
    }
}
