use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, params: &[&Tensor<F>]) -> Self {
        let m: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, v: m.clone(), m, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update with decoupled weight decay:
    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params / {} grads for state of {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::one() - F::lit(c.beta1.powi(self.t as i32));
        let bc2 = F::one() - F::lit(c.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (F::lit(c.lr), F::lit(c.eps), F::lit(c.weight_decay));
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = b1 * *mj + (F::one() - b1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = b2 * *vj + (F::one() - b2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pj -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pj);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig { lr, weight_decay: wd, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::from_vec(vec![1.5f64, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(cfg(1e-3, 0.0), &[&p]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(vec![0.0f64]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(cfg(1e-3, 0.0), &[&p]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        // m̂ = 1, v̂ = 1 → Δθ = −lr · 1 / (1 + 1e-8)
        assert!((p.data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn repeated_steps_move_against_gradient_sign() {
        let mut p = Tensor::from_vec(vec![0.0f64, 0.0]);
        let g = Tensor::from_vec(vec![0.3, -2.0]);
        let mut st = AdamState::new(cfg(1e-2, 0.0), &[&p]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        let after1 = p.clone();
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert!(after1.data()[0] < 0.0 && p.data()[0] < after1.data()[0]);
        assert!(after1.data()[1] > 0.0 && p.data()[1] > after1.data()[1]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::from_vec(vec![0.0f64, 0.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(cfg(1e-3, 0.0), &[&p]);
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
    }
}
