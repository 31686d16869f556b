//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        let v = m.clone();
        AdamState { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One Adam update. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(format!(
                "adam_step: param {i} {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient for parameter {i}")));
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = p.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = &mut m.data_mut()[i];
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64) -> (Tensor, AdamState) {
        let p = Tensor::scalar(1.0);
        let state = AdamState::new(AdamConfig::with_lr(lr), [&p]);
        (p, state)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, mut s) = scalar_state(0.1);
        adam_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut s).unwrap();
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let mut s = AdamState::new(AdamConfig::with_lr(0.01), [&p]);
        let g = Tensor::vector(vec![3.0, -0.5, 0.0]).unwrap();
        adam_step(&mut [&mut p], &[g], &mut s).unwrap();
        let d = p.data();
        assert!((d[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((d[1] - (1.0 + 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn two_steps_match_hand_executed_recurrence() {
        let (mut p, mut s) = scalar_state(0.05);
        let grads = [0.4, -1.5];
        for g in grads {
            adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut s).unwrap();
        }
        // Hand-executed with b1=0.9, b2=0.999, eps=1e-8:
        // t=1: m=0.04, v=0.00016, m^=0.4, v^=0.16, p=1-0.05*0.4/(0.4+1e-8)
        // t=2: m=0.036-0.15=-0.114, v=0.00015984+0.00225=0.00240984,
        //      m^=-0.114/0.19, v^=0.00240984/0.001999
        let p1 = 1.0 - 0.05 * 0.4 / (0.4 + 1e-8);
        let m2 = 0.9 * 0.04 + 0.1 * -1.5;
        let v2 = 0.999 * 0.00016 + 0.001 * 2.25;
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat: f64 = v2 / (1.0 - 0.998001);
        let p2 = p1 - 0.05 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - p2).abs() < 1e-12, "{} vs {p2}", p.data()[0]);
    }

    #[test]
    fn non_finite_gradient_is_divergence_and_no_update() {
        let (mut p, mut s) = scalar_state(0.1);
        let err = adam_step(&mut [&mut p], &[Tensor::scalar(f64::NAN)], &mut s).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn bit_reproducible() {
        let run = || {
            let (mut p, mut s) = scalar_state(0.01);
            for g in [0.3, -0.2, 0.9, 1e-4] {
                adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut s).unwrap();
            }
            p.data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
