//! Finetuning tasks: a frozen base model, its adapter and the data splits,
//! plus the surrogate loss and black-box metric evaluated on them.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{modulated_forward_cached, phi_gradient, AdapterKind};
use crate::data::{uniform_batch, BalancedSampler, LabeledDataset, Split, Subset};
use crate::error::{Error, Result};
use crate::gp::MetricSchedule;
use crate::metrics::{
    cross_entropy, cross_entropy_with_grad, evaluate_metric, MetricKind, MetricValue, DEFAULT_THRESHOLD,
};
use crate::nn::{Mode, ModelWeights, Tensor};
use crate::pretrain::predict_scores;
use crate::seed::derive_seed;

/// Where the metric oracle is evaluated during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSource {
    /// The held-out validation split.
    Validation,
    /// The first `size` rows of the training split.
    TrainSubset { size: usize },
}

/// Everything a finetuning run reads; never mutated after construction.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub theta: ModelWeights<f64>,
    pub adapter: AdapterKind,
    pub train: Subset,
    pub val: Subset,
    pub test: Subset,
    sampler: BalancedSampler,
}

impl TaskData {
    pub fn new(theta: ModelWeights<f64>, adapter: AdapterKind, dataset: &LabeledDataset) -> Result<Self> {
        adapter.validate_for(&theta)?;
        let (train, val, test) = (
            dataset.subset(Split::Train),
            dataset.subset(Split::Val),
            dataset.subset(Split::Test),
        );
        for (name, s) in [("train", &train), ("validation", &val), ("test", &test)] {
            if !s.has_both_classes() {
                return Err(Error::DegenerateLabels(format!("{name} split lacks a class")));
            }
        }
        let sampler = BalancedSampler::new(&train.labels)?;
        Ok(Self {
            theta,
            adapter,
            train,
            val,
            test,
            sampler,
        })
    }

    pub fn dim(&self) -> usize {
        self.adapter.dim()
    }

    pub fn metric_set(&self, source: MetricSource) -> Subset {
        match source {
            MetricSource::Validation => self.val.clone(),
            MetricSource::TrainSubset { size } => self.train.head(size),
        }
    }

    /// Mini-batch rows for step `t` of the run seeded by `seed`.
    pub fn batch_rows(&self, seed: u64, step: usize, batch: usize, balanced: bool) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch", step as u64));
        if balanced {
            self.sampler.sample(batch, &mut rng)
        } else {
            uniform_batch(self.train.len(), batch, &mut rng)
        }
    }

    /// Cross-entropy on training rows and its gradient with respect to `phi`.
    /// θ runs in eval mode, so its BatchNorm statistics stay frozen.
    pub fn loss_and_grad(&self, phi: &[f64], rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        let batch = self.train.gather(rows);
        let cache = modulated_forward_cached(&self.theta, self.adapter, phi, &batch.features, Mode::Eval)?;
        let (loss, grad) = cross_entropy_with_grad(cache.output().data(), &batch.labels);
        if !loss.is_finite() {
            return Err(Error::Diverged("finetuning loss".into()));
        }
        let upstream = Tensor::matrix(batch.len(), 1, grad)?;
        let g = phi_gradient(&self.theta, self.adapter, &cache, &upstream)?;
        Ok((loss, g))
    }

    /// Cross-entropy over a whole subset.
    pub fn loss_on(&self, phi: &[f64], subset: &Subset) -> Result<f64> {
        let cache = modulated_forward_cached(&self.theta, self.adapter, phi, &subset.features, Mode::Eval)?;
        Ok(cross_entropy(cache.output().data(), &subset.labels))
    }

    pub fn metric_on(&self, kind: MetricKind, phi: &[f64], subset: &Subset) -> Result<MetricValue> {
        let scores = predict_scores(&self.theta, self.adapter, phi, &subset.features)?;
        evaluate_metric(kind, &scores, &subset.labels, DEFAULT_THRESHOLD)
    }

    /// Random adapter initialization `N(0, std²)`.
    pub fn initial_phi(&self, std: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "phi0", 0));
        if std == 0.0 {
            return vec![0.0; self.dim()];
        }
        let normal = Normal::new(0.0, std).expect("finite positive std");
        (0..self.dim()).map(|_| normal.sample(&mut rng)).collect()
    }
}

/// Settings of one finetuning run of `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub metric: MetricKind,
    /// Steps `T`.
    pub horizon: usize,
    /// Fraction of steps at which the metric is queried.
    pub k_fraction: f64,
    pub schedule: MetricSchedule,
    pub batch_size: usize,
    /// SGD learning rate of loss-only finetuning.
    pub lr: f64,
    /// Standard deviation of the random `φ_0`.
    pub phi0_std: f64,
    /// Class-balanced mini-batches.
    pub balanced: bool,
    pub metric_source: MetricSource,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Mcr,
            horizon: 50,
            k_fraction: 0.05,
            schedule: MetricSchedule::Random,
            batch_size: 64,
            lr: 0.05,
            phi0_std: 0.01,
            balanced: true,
            metric_source: MetricSource::Validation,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon", "T must be at least 1"));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::config("k_fraction", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.phi0_std >= 0.0 && self.phi0_std.is_finite()) {
            return Err(Error::config("phi0_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// A task family member: shared data plus run settings.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub data: Arc<TaskData>,
    pub finetune: FinetuneConfig,
}
