//! The meta-test step: the guided-ES metric direction from the value
//! function added to the surrogate-loss gradient, fed to SGD or Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::guided_es::{es_direction, orthonormal_basis, sample_perturbations, GradientHistory, GuidedEsConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, SgdState};
use crate::scalar::{all_finite, norm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseOptimizer {
    Sgd { momentum: f64 },
    Adam(AdamConfig),
}

#[derive(Debug, Clone, PartialEq)]
enum BaseState<S> {
    Sgd(SgdState<S>),
    Adam(AdamState<S>, AdamConfig),
}

/// Per-run optimizer state for the combined step.
#[derive(Debug, Clone)]
pub struct MetricOptState<S> {
    cfg: GuidedEsConfig,
    /// Zero the loss gradient in the combined direction (metric-only mode).
    metric_only: bool,
    history: GradientHistory<S>,
    base: BaseState<S>,
    rng: ChaCha8Rng,
    steps: u64,
    queries: u64,
}

/// Diagnostics of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub u_norm: f64,
    pub queries: u64,
}

impl<S: Scalar> MetricOptState<S> {
    pub fn new(dim: usize, cfg: GuidedEsConfig, base: BaseOptimizer, metric_only: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let base = match base {
            BaseOptimizer::Sgd { momentum } => BaseState::Sgd(SgdState::new(dim, S::lit(momentum))),
            BaseOptimizer::Adam(c) => BaseState::Adam(AdamState::new(dim), c),
        };
        Ok(Self {
            cfg,
            metric_only,
            history: GradientHistory::new(cfg.k),
            base,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            queries: 0,
        })
    }

    pub fn config(&self) -> &GuidedEsConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Total value-function queries so far.
    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn history(&self) -> &GradientHistory<S> {
        &self.history
    }

    /// One update of `phi` along `∇ℓ + λ u` (or `λ u` in metric-only mode).
    ///
    /// With `λ = 0` the value function is never queried and no random draws
    /// are made, so the iterates equal those of the base optimizer.
    pub fn step(
        &mut self,
        phi: &mut [S],
        loss_grad: &[S],
        mut f: impl FnMut(&[S]) -> Result<S>,
        lr: S,
    ) -> Result<StepInfo> {
        if phi.len() != loss_grad.len() {
            return Err(Error::shape("metricopt step", phi.len(), loss_grad.len()));
        }
        if !all_finite(loss_grad) {
            return Err(Error::NonFinite("loss gradient"));
        }
        self.history.push(loss_grad);
        let step_queries = self.queries;
        let mut direction: Vec<S> = if self.metric_only {
            vec![S::zero(); phi.len()]
        } else {
            loss_grad.to_vec()
        };
        let mut u_norm = 0.0;
        if self.cfg.lambda != 0.0 {
            let basis = orthonormal_basis(&self.history);
            let deltas = sample_perturbations(&basis, phi.len(), &self.cfg, &mut self.rng);
            let queries = &mut self.queries;
            let u = es_direction(
                |x| {
                    *queries += 1;
                    f(x)
                },
                phi,
                &deltas,
                self.cfg.variance,
            )?;
            u_norm = norm(&u).as_f64();
            let lambda = S::lit(self.cfg.lambda);
            direction.iter_mut().zip(&u).for_each(|(g, &ui)| *g += lambda * ui);
        }
        if !all_finite(&direction) {
            return Err(Error::NonFinite("combined direction"));
        }
        match &mut self.base {
            BaseState::Sgd(s) => s.step(phi, &direction, lr)?,
            BaseState::Adam(s, c) => s.step(phi, &direction, lr, c)?,
        }
        self.steps += 1;
        Ok(StepInfo {
            grad_norm: norm(loss_grad).as_f64(),
            u_norm,
            queries: self.queries - step_queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(phi: &[f64], target: &[f64]) -> Vec<f64> {
        phi.iter().zip(target).map(|(p, t)| p - t).collect()
    }

    #[test]
    fn zero_lambda_is_plain_sgd() {
        let cfg = GuidedEsConfig {
            lambda: 0.0,
            ..GuidedEsConfig::default()
        };
        let mut st = MetricOptState::new(2, cfg, BaseOptimizer::Sgd { momentum: 0.0 }, false, 1).unwrap();
        let (mut a, mut b) = (vec![2.0, -1.0], vec![2.0, -1.0]);
        for _ in 0..20 {
            let g = quadratic_grad(&a, &[1.0, 1.0]);
            st.step(&mut a, &g, |_| panic!("value function queried"), 0.1).unwrap();
            let g = quadratic_grad(&b, &[1.0, 1.0]);
            crate::nn::sgd_step(&mut b, &g, 0.1).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(st.queries(), 0);
    }

    #[test]
    fn constant_value_function_matches_loss_only() {
        let mut st = MetricOptState::new(
            3,
            GuidedEsConfig::default(),
            BaseOptimizer::Adam(AdamConfig::default()),
            false,
            2,
        )
        .unwrap();
        let mut base = AdamState::new(3);
        let (mut a, mut b) = (vec![0.5, 0.1, -0.3], vec![0.5, 0.1, -0.3]);
        for _ in 0..10 {
            let g = quadratic_grad(&a, &[0.0; 3]);
            let info = st.step(&mut a, &g, |_| Ok(0.25), 0.05).unwrap();
            assert_eq!(info.queries, 6);
            assert_eq!(info.u_norm, 0.0);
            let g = quadratic_grad(&b, &[0.0; 3]);
            base.step(&mut b, &g, 0.05, &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(st.queries(), 60);
    }

    #[test]
    fn metric_direction_pulls_toward_metric_minimum() {
        let (loss_min, metric_min) = ([1.0, 0.0], [0.0, 1.0]);
        let f = |x: &[f64]| {
            Ok(x.iter()
                .zip(&metric_min)
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum::<f64>())
        };
        let mut st = MetricOptState::new(
            2,
            GuidedEsConfig::default(),
            BaseOptimizer::Sgd { momentum: 0.0 },
            false,
            3,
        )
        .unwrap();
        let (mut a, mut b) = (vec![0.5, -1.0], vec![0.5, -1.0]);
        for _ in 0..300 {
            let g = quadratic_grad(&a, &loss_min);
            st.step(&mut a, &g, f, 0.05).unwrap();
            let g = quadratic_grad(&b, &loss_min);
            crate::nn::sgd_step(&mut b, &g, 0.05).unwrap();
        }
        let dist = |x: &[f64]| ((x[0] - metric_min[0]).powi(2) + (x[1] - metric_min[1]).powi(2)).sqrt();
        assert!(dist(&a) < dist(&b), "{a:?} vs {b:?}");
    }

    #[test]
    fn metric_only_ignores_loss() {
        let f = |x: &[f64]| Ok(0.5 * x[0] * x[0] + 0.5 * x[1] * x[1]);
        let mut st = MetricOptState::new(
            2,
            GuidedEsConfig::default(),
            BaseOptimizer::Sgd { momentum: 0.0 },
            true,
            4,
        )
        .unwrap();
        let mut phi = vec![1.0, 1.0];
        for _ in 0..400 {
            st.step(&mut phi, &[100.0, -100.0], f, 0.05).unwrap();
        }
        assert!(phi[0].abs() < 0.3 && phi[1].abs() < 0.3, "{phi:?}");
    }
}
