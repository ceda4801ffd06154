use serde::{Deserialize, Serialize};

use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn for_params(params: &[Tensor<T>]) -> Self {
        AdamWState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub state: AdamWState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        AdamW {
            config,
            state: AdamWState::for_params(params),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        let st = &mut self.state;
        if params.len() != st.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adamw: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                st.m.len()
            )));
        }
        st.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(st.t as i32);
        let bc2 = 1.0 - c.beta2.powi(st.t as i32);
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let (one_b1, one_b2) = (lit::<T>(1.0 - c.beta1), lit::<T>(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (lit::<T>(1.0 / bc1), lit::<T>(1.0 / bc2));
        let (lr, eps, wd) = (lit::<T>(c.lr), lit::<T>(c.eps), lit::<T>(c.weight_decay));

        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut st.m).zip(&mut st.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *pi -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pi);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(theta: f64, g: f64, config: AdamWConfig) -> f64 {
        let mut p = vec![Tensor::scalar(theta)];
        let mut opt = AdamW::new(config, &p);
        opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
        p[0].data()[0]
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![Tensor::vector(vec![0.3f32, -2.0, 7.5])];
        let before = p.clone();
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..10 {
            opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.state.t, 10);
    }

    #[test]
    fn first_step_hand_arithmetic() {
        // m_hat = v_hat = 1 on the first step, so the update is lr * (1/(1+eps) + wd).
        let got = one_step(1.0, 1.0, AdamWConfig::default());
        let want = 1.0 - 8e-5 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.999919).abs() < 1e-6);
    }

    #[test]
    fn decay_only_step() {
        let got = one_step(1.0, 0.0, AdamWConfig::default());
        assert!((got - (1.0 - 8e-7)).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
