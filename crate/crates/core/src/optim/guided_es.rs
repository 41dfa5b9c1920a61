//! Guided evolution strategies over adapter parameters.
//!
//! Perturbations are drawn from `N(0, s² Σ)` with
//! `Σ = (1/2d) I + (1/2k) U Uᵀ`, where `U` is an orthonormal basis of the
//! recent loss gradients, and the descent direction is the antithetic
//! estimate `u = 1/(s² P) Σ δ_i [f(φ + δ_i) − f(φ − δ_i)]`.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

/// Residual norm (relative to the unit-normalized gradient) below which a
/// history column is treated as linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidedEsConfig {
    /// Gradient-history length.
    pub k: usize,
    /// Antithetic pairs per step.
    pub pairs: usize,
    /// Search variance `s²`.
    pub variance: f64,
    /// Weight of the metric direction in the combined step.
    pub lambda: f64,
}

impl Default for GuidedEsConfig {
    fn default() -> Self {
        Self {
            k: 3,
            pairs: 3,
            variance: 0.01,
            lambda: 1.0,
        }
    }
}

impl GuidedEsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("es.k", "gradient history needs k >= 1"));
        }
        if self.pairs == 0 {
            return Err(Error::config("es.pairs", "needs at least one antithetic pair"));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::config("es.variance", "must be positive"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("es.lambda", "must be finite"));
        }
        Ok(())
    }
}

/// Ring buffer of the most recent `capacity` loss gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientHistory<S> {
    capacity: usize,
    grads: VecDeque<Vec<S>>,
}

impl<S: Scalar> GradientHistory<S> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            grads: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, grad: &[S]) {
        if self.capacity == 0 {
            return;
        }
        if self.grads.len() == self.capacity {
            self.grads.pop_front();
        }
        self.grads.push_back(grad.to_vec());
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<S>> {
        self.grads.iter()
    }
}

/// Orthonormal columns spanning the history, by modified Gram-Schmidt with
/// one reorthogonalization pass. Dependent or zero gradients are dropped, so
/// the result has `k_eff ≤ k` columns.
pub fn orthonormal_basis<S: Scalar>(history: &GradientHistory<S>) -> Vec<Vec<S>> {
    let tol = S::lit(RANK_TOLERANCE);
    let mut basis: Vec<Vec<S>> = Vec::new();
    for g in history.iter() {
        let n = norm(g);
        if !(n > S::zero()) || !n.is_finite() {
            continue;
        }
        let mut v: Vec<S> = g.iter().map(|&x| x / n).collect();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(x, &qi)| *x -= c * qi);
            }
        }
        let r = norm(&v);
        if r < tol {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= r);
        basis.push(v);
    }
    basis
}

fn normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> S {
    S::lit(rng.sample::<f64, _>(StandardNormal))
}

/// One draw from `N(0, s² Σ)`; isotropic `s √(1/d) ε` when the basis is empty.
pub fn sample_perturbation<S: Scalar, R: Rng + ?Sized>(
    basis: &[Vec<S>],
    dim: usize,
    variance: f64,
    rng: &mut R,
) -> Vec<S> {
    let s = S::lit(variance.sqrt());
    let k = basis.len();
    let full_scale = if k == 0 {
        S::lit((1.0 / dim as f64).sqrt())
    } else {
        S::lit((0.5 / dim as f64).sqrt())
    };
    let mut delta: Vec<S> = (0..dim).map(|_| s * full_scale * normal::<S, _>(rng)).collect();
    if k > 0 {
        let sub_scale = s * S::lit((0.5 / k as f64).sqrt());
        for u in basis {
            let e: S = normal(rng);
            delta.iter_mut().zip(u).for_each(|(d, &ui)| *d += sub_scale * e * ui);
        }
    }
    delta
}

/// `P` perturbations for one step.
pub fn sample_perturbations<S: Scalar, R: Rng + ?Sized>(
    basis: &[Vec<S>],
    dim: usize,
    cfg: &GuidedEsConfig,
    rng: &mut R,
) -> Vec<Vec<S>> {
    (0..cfg.pairs)
        .map(|_| sample_perturbation(basis, dim, cfg.variance, rng))
        .collect()
}

/// Trace of `Σ` for a basis of `k_eff` orthonormal columns in dimension `d`.
pub fn covariance_trace(dim: usize, basis: &[Vec<f64>]) -> f64 {
    let k = basis.len();
    if k == 0 {
        return 1.0;
    }
    let uu: f64 = basis.iter().map(|u| dot(u, u)).sum();
    dim as f64 * (0.5 / dim as f64) + uu * (0.5 / k as f64)
}

/// Antithetic estimate of the descent direction; `2P` queries of `f`.
pub fn es_direction<S: Scalar>(
    mut f: impl FnMut(&[S]) -> Result<S>,
    phi: &[S],
    perturbations: &[Vec<S>],
    variance: f64,
) -> Result<Vec<S>> {
    let mut u = vec![S::zero(); phi.len()];
    let mut probe = phi.to_vec();
    for delta in perturbations {
        probe
            .iter_mut()
            .zip(phi)
            .zip(delta)
            .for_each(|((p, &x), &d)| *p = x + d);
        let plus = f(&probe)?;
        probe
            .iter_mut()
            .zip(phi)
            .zip(delta)
            .for_each(|((p, &x), &d)| *p = x - d);
        let minus = f(&probe)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("value function query"));
        }
        let diff = plus - minus;
        u.iter_mut().zip(delta).for_each(|(ui, &d)| *ui += d * diff);
    }
    let scale = S::one() / (S::lit(variance) * S::from_usize(perturbations.len().max(1)).unwrap());
    u.iter_mut().for_each(|x| *x *= scale);
    Ok(u)
}
