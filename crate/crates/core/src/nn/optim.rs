//! First-order update rules over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

fn check_lengths(params: usize, grads: usize) -> Result<()> {
    if params != grads {
        return Err(Error::shape("optimizer step", params, grads));
    }
    Ok(())
}

/// `w ← w − lr·g`. Parameters are left untouched if the update is not finite.
pub fn sgd_step<S: Scalar>(params: &mut [S], grads: &[S], lr: S) -> Result<()> {
    check_lengths(params.len(), grads.len())?;
    let updated: Vec<S> = params.iter().zip(grads).map(|(&w, &g)| w - lr * g).collect();
    if !all_finite(&updated) {
        return Err(Error::NonFinite("sgd_step"));
    }
    params.copy_from_slice(&updated);
    Ok(())
}

/// Heavy-ball SGD. With `momentum == 0` this is exactly [`sgd_step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState<S> {
    pub momentum: S,
    velocity: Vec<S>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(dim: usize, momentum: S) -> Self {
        Self {
            momentum,
            velocity: vec![S::zero(); dim],
        }
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S], lr: S) -> Result<()> {
        if self.momentum == S::zero() {
            return sgd_step(params, grads, lr);
        }
        check_lengths(self.velocity.len(), grads.len())?;
        let velocity: Vec<S> = self
            .velocity
            .iter()
            .zip(grads)
            .map(|(&v, &g)| self.momentum * v + g)
            .collect();
        sgd_step(params, &velocity, lr)?;
        self.velocity = velocity;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![S::zero(); dim],
            v: vec![S::zero(); dim],
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S], lr: S, cfg: &AdamConfig) -> Result<()> {
        check_lengths(params.len(), grads.len())?;
        check_lengths(self.m.len(), grads.len())?;
        let (b1, b2, eps) = (S::lit(cfg.beta1), S::lit(cfg.beta2), S::lit(cfg.eps));
        let t = self.t + 1;
        let c1 = S::one() - b1.powi(t as i32);
        let c2 = S::one() - b2.powi(t as i32);
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut updated = params.to_vec();
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + (S::one() - b1) * g;
            v[i] = b2 * v[i] + (S::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            updated[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !all_finite(&updated) {
            return Err(Error::NonFinite("adam_step"));
        }
        params.copy_from_slice(&updated);
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_one_step() {
        let mut w = [1.0];
        sgd_step(&mut w, &[2.0], 0.1).unwrap();
        assert!((w[0] - 0.8_f64).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = 2, v̂ = 4, step = 0.1 · 2 / (2 + 1e-8)
        let mut w = [1.0_f64];
        let mut s = AdamState::new(1);
        s.step(&mut w, &[2.0], 0.1, &AdamConfig::default()).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((w[0] - 0.9_f64).abs() < 1e-8);
        assert_eq!(s.timestep(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = [0.3, -1.2];
        sgd_step(&mut w, &[0.0, 0.0], 0.5).unwrap();
        let mut s = AdamState::new(2);
        for _ in 0..5 {
            s.step(&mut w, &[0.0, 0.0], 0.5, &AdamConfig::default()).unwrap();
        }
        assert_eq!(w, [0.3, -1.2]);
    }

    #[test]
    fn adam_without_moments_is_normalized_gradient() {
        let cfg = AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut s = AdamState::new(3);
        let g = [0.5_f64, -3.0, 1e-3];
        for _ in 0..3 {
            let mut w = [0.0; 3];
            s.step(&mut w, &g, 0.2, &cfg).unwrap();
            for (wi, gi) in w.iter().zip(g) {
                assert!((wi + 0.2 * gi / (gi.abs() + 1e-8)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_update_leaves_params() {
        let mut w = [1.0];
        assert!(sgd_step(&mut w, &[f64::INFINITY], 0.1).is_err());
        assert_eq!(w, [1.0]);
        let mut s = AdamState::new(1);
        assert!(s.step(&mut w, &[f64::NAN], 0.1, &AdamConfig::default()).is_err());
        assert_eq!(w, [1.0]);
        assert_eq!(s.timestep(), 0);
    }

    #[test]
    fn momentum_zero_matches_plain_sgd() {
        let mut a = [1.0, 2.0];
        let mut b = a;
        let mut s = SgdState::new(2, 0.0);
        for g in [[0.1, -0.2], [0.3, 0.4]] {
            s.step(&mut a, &g, 0.05).unwrap();
            sgd_step(&mut b, &g, 0.05).unwrap();
        }
        assert_eq!(a, b);
    }
}
