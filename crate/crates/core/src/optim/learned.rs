//! A learned coordinate-wise optimizer for adapter parameters.
//!
//! A small MLP maps, for each coordinate `i`, the features
//! `[∇_i, ∇̄_i, φ_i, ℓ, Δℓ, M, ΔM]` to `(u_i, a_i)`; the step is
//! `φ ← φ + α u` with `α = 10⁻³ · exp(mean_i a_i)`. Its weights are trained
//! by antithetic evolution strategies on a smoothed unrolled objective that
//! rewards value-function improvement and a low final loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::squash_loss;
use crate::nn::{Activation, AdamConfig, AdamState, MlpSpec, Mode, ModelWeights, Tensor};
use crate::scalar::{all_finite, softplus};

/// Per-coordinate input width.
pub const COORD_FEATURES: usize = 7;
pub const ALPHA_SCALE: f64 = 1e-3;
/// Weight of the metric term in the unrolled objective.
pub const METRIC_WEIGHT: f64 = 50.0;
pub const LOG_EPS: f64 = 1e-8;
pub const METRIC_FLOOR: f64 = 1e-4;
/// Decay of the running averages of gradient, loss and metric.
pub const AVERAGE_DECAY: f64 = 0.9;

pub fn learned_optimizer_spec() -> MlpSpec {
    MlpSpec::new(vec![COORD_FEATURES, 16, 16, 2], Activation::LeakyRelu(0.1))
}

/// Length of the flat feature vector for adapter dimension `d`.
pub fn feature_dim(d: usize) -> usize {
    3 * d + 4
}

/// Running averages needed to assemble features step by step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTracker {
    grad_avg: Option<Vec<f64>>,
    loss_avg: f64,
    metric_avg: f64,
}

impl FeatureTracker {
    /// Flat features `[∇ (d), ∇̄ (d), φ (d), ℓ, Δℓ, M, ΔM]` for this step.
    /// `ℓ` is squashed to `ℓ/(ℓ+1)`; deltas are taken against the running
    /// averages, which start at the first observed values.
    pub fn features(&mut self, grad: &[f64], phi: &[f64], loss: f64, metric: f64) -> Vec<f64> {
        let loss = squash_loss(loss);
        let b = AVERAGE_DECAY;
        let gbar = match self.grad_avg.take() {
            None => {
                self.loss_avg = loss;
                self.metric_avg = metric;
                grad.to_vec()
            }
            Some(prev) => prev.iter().zip(grad).map(|(a, g)| b * a + (1.0 - b) * g).collect(),
        };
        let (dl, dm) = (loss - self.loss_avg, metric - self.metric_avg);
        self.loss_avg = b * self.loss_avg + (1.0 - b) * loss;
        self.metric_avg = b * self.metric_avg + (1.0 - b) * metric;
        let mut out = Vec::with_capacity(feature_dim(phi.len()));
        out.extend_from_slice(grad);
        out.extend_from_slice(&gbar);
        out.extend_from_slice(phi);
        out.extend([loss, dl, metric, dm]);
        self.grad_avg = Some(gbar);
        out
    }
}

/// `(α, u)` from flat features of an adapter of dimension `d`.
pub fn learned_opt_step(w_opt: &ModelWeights<f64>, features: &[f64], d: usize) -> Result<(f64, Vec<f64>)> {
    if features.len() != feature_dim(d) {
        return Err(Error::shape(
            "learned optimizer features",
            feature_dim(d),
            features.len(),
        ));
    }
    let scalars = &features[3 * d..];
    let mut rows = Vec::with_capacity(d * COORD_FEATURES);
    for i in 0..d {
        rows.extend([features[i], features[d + i], features[2 * d + i]]);
        rows.extend_from_slice(scalars);
    }
    let out = w_opt.forward(&Tensor::matrix(d, COORD_FEATURES, rows)?, Mode::Eval)?;
    let u: Vec<f64> = (0..d).map(|i| out.row(i)[0]).collect();
    let mean_a = (0..d).map(|i| out.row(i)[1]).sum::<f64>() / d as f64;
    let alpha = ALPHA_SCALE * mean_a.exp();
    if !alpha.is_finite() || !all_finite(&u) {
        return Err(Error::NonFinite("learned optimizer output"));
    }
    Ok((alpha, u))
}

/// A finetuning problem the learned optimizer can be unrolled on. Step `t`
/// must see the same mini-batch on every unroll so antithetic pairs compare
/// like with like.
pub trait UnrollTask {
    fn dim(&self) -> usize;
    fn initial(&self) -> Vec<f64>;
    fn loss_and_grad(&self, phi: &[f64], step: usize) -> Result<(f64, Vec<f64>)>;
}

/// Iterates `φ_0..φ_T` with losses and value-function outputs at each.
#[derive(Debug, Clone, PartialEq)]
pub struct Unrolled {
    pub phis: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub metrics: Vec<f64>,
}

pub fn unroll(
    w_opt: &ModelWeights<f64>,
    task: &dyn UnrollTask,
    f: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    horizon: usize,
) -> Result<Unrolled> {
    let d = task.dim();
    let mut phi = task.initial();
    let mut tracker = FeatureTracker::default();
    let mut out = Unrolled {
        phis: Vec::with_capacity(horizon + 1),
        losses: Vec::with_capacity(horizon + 1),
        metrics: Vec::with_capacity(horizon + 1),
    };
    for t in 0..horizon {
        let (loss, grad) = task.loss_and_grad(&phi, t)?;
        let metric = f(&phi)?;
        if !loss.is_finite() || !metric.is_finite() {
            return Err(Error::Diverged(format!("unrolled step {t}")));
        }
        let feats = tracker.features(&grad, &phi, loss, metric);
        let (alpha, u) = learned_opt_step(w_opt, &feats, d)?;
        out.phis.push(phi.clone());
        out.losses.push(loss);
        out.metrics.push(metric);
        phi.iter_mut().zip(&u).for_each(|(p, ui)| *p += alpha * ui);
        if !all_finite(&phi) {
            return Err(Error::Diverged(format!("unrolled step {t}")));
        }
    }
    let (loss, _) = task.loss_and_grad(&phi, horizon)?;
    out.metrics.push(f(&phi)?);
    out.losses.push(loss);
    out.phis.push(phi);
    Ok(out)
}

/// Metric and loss parts of the unrolled objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnedLoss {
    pub total: f64,
    pub metric: f64,
    pub loss: f64,
}

/// Objective over `M̂_0..M̂_T` and `ℓ_0..ℓ_T` with `β = T/2`:
/// `L_metric = 1/T Σ softplus(β (M̂_t − M̂_t') / M̂_t)` with `t'` the best
/// earlier step, and `L_loss = 1/T Σ [log(ℓ_t + ε) − log(ℓ_0 + ε)]`.
pub fn loss_learned_optimizer(metrics: &[f64], losses: &[f64]) -> Result<LearnedLoss> {
    if metrics.len() != losses.len() || metrics.len() < 2 {
        return Err(Error::InvalidArgument("unrolled objective needs T >= 1 steps".into()));
    }
    let horizon = metrics.len() - 1;
    let beta = horizon as f64 / 2.0;
    let mut best = metrics[0];
    let mut metric_term = 0.0;
    for &m in &metrics[1..] {
        let mt = m.max(METRIC_FLOOR);
        metric_term += softplus(beta * (m - best) / mt);
        best = best.min(m);
    }
    let l0 = (losses[0] + LOG_EPS).ln();
    let loss_term: f64 = losses[1..].iter().map(|l| (l + LOG_EPS).ln() - l0).sum();
    let (metric, loss) = (metric_term / horizon as f64, loss_term / horizon as f64);
    let total = METRIC_WEIGHT * metric + loss;
    if !total.is_finite() {
        return Err(Error::NonFinite("learned optimizer objective"));
    }
    Ok(LearnedLoss { total, metric, loss })
}

/// Antithetic ES gradient of `objective` at `w`: the mean over pairs of
/// `(L(w + σξ) − L(w − σξ)) ξ / (2σ)`. Pairs where either side is `None`
/// are discarded. Returns the estimate and the number of pairs kept.
pub fn antithetic_gradient<R: Rng + ?Sized>(
    objective: &(dyn Fn(&[f64], usize) -> Option<f64> + Sync),
    w: &[f64],
    sigma: f64,
    pairs: usize,
    rng: &mut R,
) -> (Vec<f64>, usize) {
    let noise: Vec<Vec<f64>> = (0..pairs)
        .map(|_| (0..w.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let diffs: Vec<Option<f64>> = noise
        .par_iter()
        .enumerate()
        .map(|(j, xi)| {
            let plus: Vec<f64> = w.iter().zip(xi).map(|(a, x)| a + sigma * x).collect();
            let minus: Vec<f64> = w.iter().zip(xi).map(|(a, x)| a - sigma * x).collect();
            Some(objective(&plus, j)? - objective(&minus, j)?).filter(|d| d.is_finite())
        })
        .collect();
    let mut grad = vec![0.0; w.len()];
    let mut kept = 0;
    for (xi, d) in noise.iter().zip(&diffs) {
        if let Some(d) = d {
            kept += 1;
            grad.iter_mut().zip(xi).for_each(|(g, x)| *g += d * x / (2.0 * sigma));
        }
    }
    if kept > 0 {
        grad.iter_mut().for_each(|g| *g /= kept as f64);
    }
    (grad, kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedTrainConfig {
    pub iterations: usize,
    /// Antithetic pairs per iteration; each pair shares one sampled task.
    pub pairs: usize,
    /// Smoothing variance `ε²` of the perturbed weights.
    pub variance: f64,
    pub lr: f64,
    pub horizon: usize,
}

impl Default for LearnedTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            pairs: 16,
            variance: 0.01,
            lr: 0.01,
            horizon: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedTrainReport {
    /// Mean objective of the kept pairs per iteration.
    pub objective: Vec<f64>,
    pub discarded_pairs: usize,
}

/// Trains `w_opt` in place with antithetic ES and Adam. `sample_task(seed)`
/// builds the task for one pair.
pub fn train_learned_optimizer<T: UnrollTask + Sync>(
    w_opt: &mut ModelWeights<f64>,
    sample_task: &(dyn Fn(u64) -> Result<T> + Sync),
    f: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    cfg: &LearnedTrainConfig,
    seed: u64,
) -> Result<LearnedTrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(w_opt.num_params());
    let adam_cfg = AdamConfig::default();
    let sigma = cfg.variance.sqrt();
    let mut report = LearnedTrainReport {
        objective: Vec::with_capacity(cfg.iterations),
        discarded_pairs: 0,
    };
    for _ in 0..cfg.iterations {
        let task_seeds: Vec<u64> = (0..cfg.pairs).map(|_| rng.random()).collect();
        let tasks: Vec<T> = task_seeds.iter().map(|&s| sample_task(s)).collect::<Result<_>>()?;
        let template = w_opt.clone();
        let objective = |params: &[f64], pair: usize| -> Option<f64> {
            let mut w = template.clone();
            w.set_params(params).ok()?;
            let run = unroll(&w, &tasks[pair], f, cfg.horizon).ok()?;
            loss_learned_optimizer(&run.metrics, &run.losses).ok().map(|l| l.total)
        };
        let params = w_opt.params();
        let (grad, kept) = antithetic_gradient(&objective, &params, sigma, cfg.pairs, &mut rng);
        report.discarded_pairs += cfg.pairs - kept;
        if kept == 0 {
            continue;
        }
        let current: Vec<f64> = (0..cfg.pairs).filter_map(|j| objective(&params, j)).collect();
        report
            .objective
            .push(current.iter().sum::<f64>() / current.len().max(1) as f64);
        let mut params = params;
        adam.step(&mut params, &grad, cfg.lr, &adam_cfg)?;
        w_opt.set_params(&params)?;
    }
    Ok(report)
}

/// Two-dimensional problem whose loss and metric minimizers differ:
/// `ℓ(φ) = ½‖φ − a‖²` and `f(φ) = c + ½‖φ − b‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchToy {
    pub loss_min: Vec<f64>,
    pub metric_min: Vec<f64>,
    pub offset: f64,
    /// Standard deviation of the start point around the loss minimizer.
    pub start_std: f64,
}

impl Default for MismatchToy {
    fn default() -> Self {
        Self {
            loss_min: vec![2.0, 2.0],
            metric_min: vec![0.0, 0.0],
            offset: 0.1,
            start_std: 1.0,
        }
    }
}

impl MismatchToy {
    pub fn loss(&self, phi: &[f64]) -> f64 {
        0.5 * phi
            .iter()
            .zip(&self.loss_min)
            .map(|(p, a)| (p - a) * (p - a))
            .sum::<f64>()
    }

    pub fn loss_grad(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter().zip(&self.loss_min).map(|(p, a)| p - a).collect()
    }

    pub fn metric(&self, phi: &[f64]) -> f64 {
        self.offset
            + 0.5
                * phi
                    .iter()
                    .zip(&self.metric_min)
                    .map(|(p, b)| (p - b) * (p - b))
                    .sum::<f64>()
    }

    pub fn start(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.loss_min
            .iter()
            .map(|a| a + self.start_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn task(&self, seed: u64) -> ToyTask<'_> {
        ToyTask {
            toy: self,
            start: self.start(seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask<'a> {
    toy: &'a MismatchToy,
    start: Vec<f64>,
}

impl UnrollTask for ToyTask<'_> {
    fn dim(&self) -> usize {
        self.start.len()
    }

    fn initial(&self) -> Vec<f64> {
        self.start.clone()
    }

    fn loss_and_grad(&self, phi: &[f64], _step: usize) -> Result<(f64, Vec<f64>)> {
        Ok((self.toy.loss(phi), self.toy.loss_grad(phi)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_leaves_phi() {
        let w = ModelWeights::zeros(learned_optimizer_spec()).unwrap();
        let mut tracker = FeatureTracker::default();
        let feats = tracker.features(&[0.3, -0.1], &[1.0, 2.0], 0.5, 0.2);
        let (alpha, u) = learned_opt_step(&w, &feats, 2).unwrap();
        assert_eq!(alpha, ALPHA_SCALE);
        assert_eq!(u, vec![0.0, 0.0]);
    }

    #[test]
    fn feature_layout() {
        let mut tracker = FeatureTracker::default();
        let d = 5;
        let f1 = tracker.features(&[1.0; 5], &[0.0; 5], 3.0, 0.4);
        assert_eq!(f1.len(), feature_dim(d));
        assert_eq!(feature_dim(d), 19);
        // first step: averages equal the current values
        assert_eq!(&f1[3 * d..], &[0.75, 0.0, 0.4, 0.0]);
        let f2 = tracker.features(&[0.0; 5], &[0.0; 5], 1.0, 0.3);
        assert!((f2[d] - 0.9).abs() < 1e-15);
        assert!((f2[3 * d + 1] - (0.5 - 0.75)).abs() < 1e-15);
        assert!((f2[3 * d + 3] - (0.3 - 0.4)).abs() < 1e-15);
    }

    #[test]
    fn objective_identities() {
        let ln2 = std::f64::consts::LN_2;
        let flat = loss_learned_optimizer(&[0.3; 6], &[1.2; 6]).unwrap();
        assert!((flat.metric - ln2).abs() < 1e-15);
        assert_eq!(flat.loss, 0.0);
        assert!((flat.total - METRIC_WEIGHT * ln2).abs() < 1e-12);
        let improving = loss_learned_optimizer(&[0.5, 0.4, 0.3, 0.2], &[1.0; 4]).unwrap();
        assert!(improving.metric < ln2);
        assert!(loss_learned_optimizer(&[0.1], &[0.1]).is_err());
    }

    #[test]
    fn es_gradient_on_quadratic() {
        let target: Vec<f64> = (0..10).map(|i| i as f64 * 0.1 - 0.4).collect();
        let obj = |w: &[f64], _: usize| Some(w.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        let w = vec![0.0; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, kept) = antithetic_gradient(&obj, &w, 0.1, 1000, &mut rng);
        assert_eq!(kept, 1000);
        let exact: Vec<f64> = target.iter().map(|b| -2.0 * b).collect();
        assert!(crate::oracle::cosine_similarity(&g, &exact) > 0.9);
    }

    #[test]
    fn zero_iterations_leave_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = ModelWeights::init(learned_optimizer_spec(), &mut rng).unwrap();
        let before = w.clone();
        let toy = MismatchToy::default();
        let cfg = LearnedTrainConfig {
            iterations: 0,
            ..LearnedTrainConfig::default()
        };
        let f = |x: &[f64]| Ok(toy.metric(x));
        train_learned_optimizer(&mut w, &|s| Ok(toy.task(s)), &f, &cfg, 0).unwrap();
        assert_eq!(w, before);
    }
}
