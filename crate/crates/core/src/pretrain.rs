//! Pre-training of the frozen base classifier θ.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{modulated_forward, modulated_forward_cached, AdapterKind};
use crate::data::{uniform_batch, BalancedSampler, Subset};
use crate::error::{Error, Result};
use crate::metrics::cross_entropy_with_grad;
use crate::nn::{Activation, AdamConfig, AdamState, MlpSpec, Mode, ModelWeights, Tensor};

/// Hidden widths of the base classifier.
pub const BASE_HIDDEN: [usize; 3] = [100, 30, 10];
pub const BASE_LEAKY_SLOPE: f64 = 0.01;

/// `[p (+ d), 100, 30, 10, 1]`, leaky ReLU with BatchNorm on hidden layers and
/// identity (logit) output. Dynamic biases widen the input by `d`.
pub fn base_model_spec(num_features: usize, adapter: AdapterKind) -> MlpSpec {
    let input = match adapter {
        AdapterKind::DynamicBias { dim } => num_features + dim,
        AdapterKind::Film { .. } => num_features,
    };
    let mut sizes = vec![input];
    sizes.extend(BASE_HIDDEN);
    sizes.push(1);
    MlpSpec::new(sizes, Activation::LeakyRelu(BASE_LEAKY_SLOPE)).with_batchnorm(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Class-balanced mini-batches instead of uniform ones.
    pub balanced: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 64,
            lr: 1e-3,
            balanced: true,
        }
    }
}

/// Cross-entropy pre-training with Adam, `phi = 0` in the adapter slot.
pub fn pretrain_base_model(
    spec: MlpSpec,
    adapter: AdapterKind,
    train: &Subset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<ModelWeights<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = ModelWeights::init(spec, &mut rng)?;
    adapter.validate_for(&theta)?;
    if cfg.steps == 0 {
        return Ok(theta);
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let sampler = if cfg.balanced {
        Some(BalancedSampler::new(&train.labels)?)
    } else {
        None
    };
    let phi = vec![0.0; adapter.dim()];
    let mut adam = AdamState::new(theta.num_params());
    let adam_cfg = AdamConfig::default();
    for step in 0..cfg.steps {
        let rows = match &sampler {
            Some(s) => s.sample(cfg.batch_size, &mut rng),
            None => uniform_batch(train.len(), cfg.batch_size, &mut rng),
        };
        let batch = train.gather(&rows);
        let cache = modulated_forward_cached(&theta, adapter, &phi, &batch.features, Mode::Train)?;
        let (loss, grad) = cross_entropy_with_grad(cache.output().data(), &batch.labels);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("pre-training loss at step {step}")));
        }
        let upstream = Tensor::matrix(batch.len(), 1, grad)?;
        let back = theta.backward(&cache, &upstream, &[])?;
        let mut params = theta.params();
        adam.step(&mut params, &back.weights.flat(), cfg.lr, &adam_cfg)?;
        theta.set_params(&params)?;
        theta.update_running_stats(&cache);
    }
    // settle the running statistics on full-split passes
    for _ in 0..20 {
        let rows = uniform_batch(train.len(), train.len().min(512), &mut rng);
        let batch = train.gather(&rows);
        let cache = modulated_forward_cached(&theta, adapter, &phi, &batch.features, Mode::Train)?;
        theta.update_running_stats(&cache);
    }
    Ok(theta)
}

/// Sigmoid scores of the adapted model in eval mode.
pub fn predict_scores(
    theta: &ModelWeights<f64>,
    adapter: AdapterKind,
    phi: &[f64],
    x: &Tensor<f64>,
) -> Result<Vec<f64>> {
    let logits = modulated_forward(theta, adapter, phi, x, Mode::Eval)?;
    Ok(logits.data().iter().map(|&z| crate::scalar::sigmoid(z)).collect())
}
