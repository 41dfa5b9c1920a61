//! The value function `f(phi)`: a `d-64-32-32-16-1` ReLU network with
//! BatchNorm that predicts the (lower-is-better) metric reached by adapter
//! parameters `phi`, and its training objective.
//!
//! The objective is `γ · L_regress + L_oe`. `L_regress` is the absolute
//! prediction error weighted by `1/σ̂`; `L_oe` is a softplus triplet loss on
//! distances between penultimate-layer embeddings, where positives and
//! negatives are split by Fisher's ratio of the interpolated metric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::InterpolatedTrace;
use crate::nn::{Activation, AdamConfig, AdamState, ForwardCache, MlpSpec, Mode, ModelWeights, Tensor};
use crate::scalar::{all_finite, sigmoid, softplus, Scalar};
use crate::stats;

pub const HIDDEN: [usize; 4] = [64, 32, 32, 16];
pub const EMBEDDING_DIM: usize = 16;
pub const FISHER_THRESHOLD: f64 = 2.0;
pub const DEFAULT_GAMMA: f64 = 10.0;
pub const ANCHOR_BATCH: usize = 32;

pub fn value_function_spec(d: usize) -> MlpSpec {
    let mut sizes = vec![d];
    sizes.extend(HIDDEN);
    sizes.push(1);
    MlpSpec::new(sizes, Activation::Relu).with_batchnorm(true)
}

pub fn init_value_function<S: Scalar, R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<ModelWeights<S>> {
    ModelWeights::init(value_function_spec(d), rng)
}

fn single<S: Scalar>(w: &ModelWeights<S>, phi: &[S]) -> Result<Tensor<S>> {
    if phi.len() != w.spec().input_dim() {
        return Err(Error::shape("value function input", w.spec().input_dim(), phi.len()));
    }
    Ok(Tensor::row_vector(phi))
}

/// Scalar prediction in eval mode.
pub fn predict<S: Scalar>(w: &ModelWeights<S>, phi: &[S]) -> Result<S> {
    Ok(w.forward(&single(w, phi)?, Mode::Eval)?.data()[0])
}

/// Predictions for every row of `phis` in eval mode.
pub fn predict_batch<S: Scalar>(w: &ModelWeights<S>, phis: &Tensor<S>) -> Result<Vec<S>> {
    Ok(w.forward(phis, Mode::Eval)?.into_data())
}

/// Penultimate activation in eval mode.
pub fn embed<S: Scalar>(w: &ModelWeights<S>, phi: &[S]) -> Result<Vec<S>> {
    let cache = w.forward_cached(&single(w, phi)?, Mode::Eval, None)?;
    Ok(cache.penultimate().data().to_vec())
}

/// `∂f/∂phi` in eval mode.
pub fn grad_phi<S: Scalar>(w: &ModelWeights<S>, phi: &[S]) -> Result<Vec<S>> {
    let cache = w.forward_cached(&single(w, phi)?, Mode::Eval, None)?;
    let back = w.backward(&cache, &Tensor::row_vector(&[S::one()]), &[])?;
    Ok(back.input.into_data())
}

/// `(M̂_a − M̂_b)² / (σ̂_a² + σ̂_b²)`.
pub fn fisher_ratio<S: Scalar>(mean_a: S, std_a: S, mean_b: S, std_b: S) -> S {
    let diff = mean_a - mean_b;
    diff * diff / (std_a * std_a + std_b * std_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherSet {
    Positive,
    Negative,
}

/// Positive below the threshold, negative at or above it.
pub fn fisher_set<S: Scalar>(ratio: S) -> FisherSet {
    if ratio < S::lit(FISHER_THRESHOLD) {
        FisherSet::Positive
    } else {
        FisherSet::Negative
    }
}

/// Adapter parameters along a trajectory with their interpolated metric.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence<S> {
    /// `T × d`, one row per step.
    pub phis: Tensor<S>,
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Scalar> TrainingSequence<S> {
    pub fn new(phis: Tensor<S>, mean: Vec<S>, std: Vec<S>) -> Result<Self> {
        if phis.rows() != mean.len() || mean.len() != std.len() {
            return Err(Error::shape(
                "training sequence",
                phis.rows(),
                format!("{} / {}", mean.len(), std.len()),
            ));
        }
        if std.iter().any(|&s| !(s > S::zero())) {
            return Err(Error::InvalidArgument(
                "interpolated deviations must be positive".into(),
            ));
        }
        Ok(Self { phis, mean, std })
    }

    /// Pairs step `t` (1-based in the trace) with row `t − 1` of `phis`.
    pub fn from_trace(phis: Tensor<S>, trace: &InterpolatedTrace<S>) -> Result<Self> {
        Self::new(phis, trace.mean.clone(), trace.std.clone())
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn set_of(&self, a: usize, b: usize) -> FisherSet {
        fisher_set(fisher_ratio(self.mean[a], self.std[a], self.mean[b], self.std[b]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().sqrt()
}

/// Hardest positive (farthest) and hardest negative (nearest) per anchor,
/// given precomputed embeddings (one row per step). The anchor itself is
/// excluded from its positive set; anchors with an empty set are skipped.
pub fn mine_triplets_from_embeddings<S: Scalar>(
    seq: &TrainingSequence<S>,
    embeddings: &Tensor<S>,
    anchors: &[usize],
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &t in anchors {
        let mut pos: Option<(S, usize)> = None;
        let mut neg: Option<(S, usize)> = None;
        for u in 0..seq.len() {
            if u == t {
                continue;
            }
            let d = distance(embeddings.row(t), embeddings.row(u));
            match seq.set_of(t, u) {
                FisherSet::Positive => {
                    if pos.is_none_or(|(best, _)| d > best) {
                        pos = Some((d, u));
                    }
                }
                FisherSet::Negative => {
                    if neg.is_none_or(|(best, _)| d < best) {
                        neg = Some((d, u));
                    }
                }
            }
        }
        if let (Some((_, p)), Some((_, n))) = (pos, neg) {
            out.push(Triplet {
                anchor: t,
                positive: p,
                negative: n,
            });
        }
    }
    out
}

/// Mines triplets using embeddings of the full sequence under `mode`.
pub fn mine_triplets<S: Scalar>(
    w: &ModelWeights<S>,
    seq: &TrainingSequence<S>,
    anchors: &[usize],
    mode: Mode,
) -> Result<Vec<Triplet>> {
    let cache = w.forward_cached(&seq.phis, mode, None)?;
    Ok(mine_triplets_from_embeddings(seq, cache.penultimate(), anchors))
}

/// `Σ |f_t − M̂_t| / σ̂_t  /  Σ 1/σ̂_t`. Weights are taken relative to the
/// smallest `σ̂`, so equal deviations give exactly the mean absolute error.
pub fn regression_loss<S: Scalar>(pred: &[S], mean: &[S], std: &[S]) -> S {
    let reference = std.iter().copied().fold(S::infinity(), S::min);
    let num: S = pred
        .iter()
        .zip(mean)
        .zip(std)
        .map(|((&f, &m), &s)| (f - m).abs() * (reference / s))
        .sum();
    let den: S = std.iter().map(|&s| reference / s).sum();
    num / den
}

/// Mean of `softplus(D_pos − D_neg)` over `(D_pos, D_neg)` pairs; zero when empty.
pub fn ordinal_loss<S: Scalar>(distances: &[(S, S)]) -> S {
    if distances.is_empty() {
        return S::zero();
    }
    distances.iter().map(|&(dp, dn)| softplus(dp - dn)).sum::<S>() / S::from_usize(distances.len()).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueLossConfig {
    pub gamma: f64,
    /// Disables `L_oe` (ablation switch).
    pub ordinal: bool,
}

impl Default for ValueLossConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            ordinal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueLoss<S> {
    pub total: S,
    pub regress: S,
    pub ordinal: S,
    pub triplets: usize,
    /// Flat gradient, ordered like [`ModelWeights::params`].
    pub grads: Vec<S>,
}

/// `γ · L_regress + L_oe` and its gradient, with BatchNorm in train mode
/// over the whole sequence. Returns the forward record so the caller can
/// update running statistics.
pub fn loss_value_function<S: Scalar>(
    w: &ModelWeights<S>,
    seq: &TrainingSequence<S>,
    triplets: &[Triplet],
    cfg: &ValueLossConfig,
) -> Result<(ValueLoss<S>, ForwardCache<S>)> {
    if !(cfg.gamma > 0.0) {
        return Err(Error::InvalidArgument("gamma must be positive".into()));
    }
    let n = seq.len();
    let cache = w.forward_cached(&seq.phis, Mode::Train, None)?;
    let pred = cache.output().data();
    let gamma = S::lit(cfg.gamma);
    let regress = regression_loss(pred, &seq.mean, &seq.std);
    let den: S = seq.std.iter().map(|&s| S::one() / s).sum();
    let grad_out: Vec<S> = (0..n)
        .map(|t| {
            let r = pred[t] - seq.mean[t];
            let sign = if r > S::zero() {
                S::one()
            } else if r < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            gamma * sign / (seq.std[t] * den)
        })
        .collect();

    let emb = cache.penultimate();
    let width = emb.cols();
    let mut grad_emb = vec![S::zero(); n * width];
    let mut ordinal = S::zero();
    let used = if cfg.ordinal { triplets } else { &[][..] };
    if !used.is_empty() {
        let mut pairs = Vec::with_capacity(used.len());
        let scale = S::one() / S::from_usize(used.len()).unwrap();
        for tr in used {
            let (a, p, q) = (emb.row(tr.anchor), emb.row(tr.positive), emb.row(tr.negative));
            let (dp, dn) = (distance(a, p), distance(a, q));
            pairs.push((dp, dn));
            // d softplus(x)/dx = sigmoid(x), x = dp − dn
            let c = sigmoid(dp - dn) * scale;
            for j in 0..width {
                let gp = if dp > S::zero() {
                    c * (a[j] - p[j]) / dp
                } else {
                    S::zero()
                };
                let gn = if dn > S::zero() {
                    c * (a[j] - q[j]) / dn
                } else {
                    S::zero()
                };
                grad_emb[tr.anchor * width + j] += gp - gn;
                grad_emb[tr.positive * width + j] -= gp;
                grad_emb[tr.negative * width + j] += gn;
            }
        }
        ordinal = ordinal_loss(&pairs);
    }
    let total = gamma * regress + ordinal;
    if !total.is_finite() {
        return Err(Error::NonFinite("value-function loss"));
    }
    let upstream = Tensor::matrix(n, 1, grad_out)?;
    let hidden = Tensor::matrix(n, width, grad_emb)?;
    let last_hidden = w.spec().hidden_layers() - 1;
    let back = w.backward(&cache, &upstream, &[(last_hidden, &hidden)])?;
    let grads = back.weights.flat();
    if !all_finite(&grads) {
        return Err(Error::NonFinite("value-function gradient"));
    }
    Ok((
        ValueLoss {
            total,
            regress,
            ordinal,
            triplets: used.len(),
            grads,
        },
        cache,
    ))
}

/// Uniform anchors (all steps when the sequence is short).
pub fn sample_anchors<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if len <= batch {
        return (0..len).collect();
    }
    let mut a: Vec<usize> = rand::seq::index::sample(rng, len, batch).into_vec();
    a.sort_unstable();
    a
}

/// `steps` Adam steps on the value-function objective over one sequence.
/// Returns the loss of the last step.
pub fn fit_value_function<R: Rng + ?Sized>(
    w: &mut ModelWeights<f64>,
    seq: &TrainingSequence<f64>,
    steps: usize,
    lr: f64,
    cfg: &ValueLossConfig,
    rng: &mut R,
) -> Result<Option<ValueLoss<f64>>> {
    let mut adam = AdamState::new(w.num_params());
    let adam_cfg = AdamConfig::default();
    let mut last = None;
    for _ in 0..steps {
        let triplets = if cfg.ordinal {
            let anchors = sample_anchors(seq.len(), ANCHOR_BATCH, rng);
            mine_triplets(w, seq, &anchors, Mode::Train)?
        } else {
            Vec::new()
        };
        let (loss, cache) = loss_value_function(w, seq, &triplets, cfg)?;
        let mut params = w.params();
        adam.step(&mut params, &loss.grads, lr, &adam_cfg)?;
        w.set_params(&params)?;
        w.update_running_stats(&cache);
        last = Some(loss);
    }
    Ok(last)
}

/// Sets the running statistics to the average of the train-mode batch
/// statistics of each sequence, i.e. the quantity an exponential running
/// average over many trajectory batches estimates.
pub fn calibrate_running_stats(w: &mut ModelWeights<f64>, seqs: &[TrainingSequence<f64>]) -> Result<()> {
    if seqs.is_empty() {
        return Ok(());
    }
    let mut sum: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
    for seq in seqs {
        let stats = w.forward_cached(&seq.phis, Mode::Train, None)?.batch_stats();
        match &mut sum {
            None => sum = Some(stats),
            Some(acc) => {
                for ((am, av), (m, v)) in acc.iter_mut().zip(&stats) {
                    am.iter_mut().zip(m).for_each(|(a, b)| *a += b);
                    av.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    let n = seqs.len() as f64;
    let mut stats = sum.unwrap_or_default();
    for (m, v) in &mut stats {
        m.iter_mut().chain(v.iter_mut()).for_each(|x| *x /= n);
    }
    w.set_running_stats(&stats)
}

/// Mean `|f(phi_t) − M̂_t|` in eval mode.
pub fn prediction_error(w: &ModelWeights<f64>, seq: &TrainingSequence<f64>) -> Result<f64> {
    let pred = predict_batch(w, &seq.phis)?;
    Ok(stats::mean(
        &pred
            .iter()
            .zip(&seq.mean)
            .map(|(f, m)| (f - m).abs())
            .collect::<Vec<_>>(),
    ))
}

/// Spearman correlation between embedding distances and metric gaps over
/// all step pairs of a sequence, in eval mode.
pub fn embedding_ordinality(w: &ModelWeights<f64>, seq: &TrainingSequence<f64>) -> Result<f64> {
    let cache = w.forward_cached(&seq.phis, Mode::Eval, None)?;
    let emb = cache.penultimate();
    let (mut dist, mut gap) = (Vec::new(), Vec::new());
    for a in 0..seq.len() {
        for b in a + 1..seq.len() {
            dist.push(distance(emb.row(a), emb.row(b)));
            gap.push((seq.mean[a] - seq.mean[b]).abs());
        }
    }
    Ok(stats::spearman(&dist, &gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sequence(n: usize, d: usize, seed: u64) -> TrainingSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phis = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mean = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let std = (0..n).map(|_| rng.random_range(0.01..0.2)).collect();
        TrainingSequence::new(phis, mean, std).unwrap()
    }

    #[test]
    fn zero_network_predicts_output_bias() {
        let mut w = ModelWeights::<f64>::zeros(value_function_spec(3)).unwrap();
        w.layer_mut(4).bias[0] = 0.37;
        assert_eq!(predict(&w, &[0.5, -2.0, 1.0]).unwrap(), 0.37);
        assert_eq!(predict(&w, &[0.0, 0.0, 9.0]).unwrap(), 0.37);
    }

    #[test]
    fn embedding_is_sixteen_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [2, 16, 40] {
            let w = init_value_function::<f64, _>(d, &mut rng).unwrap();
            assert_eq!(embed(&w, &vec![0.1; d]).unwrap().len(), EMBEDDING_DIM);
        }
    }

    #[test]
    fn fisher_examples() {
        assert_eq!(fisher_set(fisher_ratio(0.5, 0.1, 0.5, 0.3)), FisherSet::Positive);
        let r = fisher_ratio(0.8, 0.1, 0.4, 0.1);
        assert!((r - 8.0_f64).abs() < 1e-12);
        assert_eq!(fisher_set(r), FisherSet::Negative);
        assert_eq!(fisher_set(2.0), FisherSet::Negative);
    }

    #[test]
    fn huge_uncertainty_yields_no_triplets() {
        let mut seq = sequence(10, 2, 1);
        seq.std.iter_mut().for_each(|s| *s = 100.0);
        let emb = seq.phis.clone();
        assert!(mine_triplets_from_embeddings(&seq, &emb, &[0, 3, 5]).is_empty());
    }

    #[test]
    fn forced_single_triplet() {
        let phis = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let seq = TrainingSequence::new(phis.clone(), vec![0.5, 0.51, 0.9], vec![0.01; 3]).unwrap();
        let t = mine_triplets_from_embeddings(&seq, &phis, &[0]);
        assert_eq!(
            t,
            vec![Triplet {
                anchor: 0,
                positive: 1,
                negative: 2
            }]
        );
    }

    #[test]
    fn two_clusters_mine_across() {
        let n = 12;
        let mean: Vec<f64> = (0..n)
            .map(|i| if i < 6 { 0.2 } else { 0.8 } + 0.001 * i as f64)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let seq = TrainingSequence::new(emb.clone(), mean, vec![0.02; n]).unwrap();
        let anchors: Vec<usize> = (0..n).collect();
        let triplets = mine_triplets_from_embeddings(&seq, &emb, &anchors);
        assert_eq!(triplets.len(), n);
        for t in &triplets {
            assert_ne!(t.anchor < 6, t.negative < 6);
            assert_eq!(t.anchor < 6, t.positive < 6);
            // brute-force hardest choices
            let d = |u: usize| distance(emb.row(t.anchor), emb.row(u));
            let same: Vec<usize> = (0..n).filter(|&u| u != t.anchor && (u < 6) == (t.anchor < 6)).collect();
            let other: Vec<usize> = (0..n).filter(|&u| (u < 6) != (t.anchor < 6)).collect();
            assert!(same.iter().all(|&u| d(u) <= d(t.positive)));
            assert!(other.iter().all(|&u| d(u) >= d(t.negative)));
        }
    }

    #[test]
    fn loss_identities() {
        let pred = [0.1_f64, 0.5, 0.2];
        let mean = [0.3, 0.4, 0.2];
        let mae = (0.2 + 0.1 + 0.0) / 3.0;
        assert_eq!(
            regression_loss(&pred, &mean, &[0.05; 3]),
            pred.iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0
        );
        assert!((regression_loss(&pred, &mean, &[0.05; 3]) - mae).abs() < 1e-15);
        assert_eq!(regression_loss(&mean, &mean, &[0.05, 0.1, 0.2]), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((ordinal_loss(&[(0.3, 0.3), (1.2, 1.2)]) - ln2).abs() < 1e-12);
        let std = [0.01, 0.2, 0.07];
        let scaled: Vec<f64> = std.iter().map(|s| s * 3.7).collect();
        assert!((regression_loss(&pred, &mean, &std) - regression_loss(&pred, &mean, &scaled)).abs() < 1e-12);
        assert!(ordinal_loss(&[(0.1, 0.5)]) < ordinal_loss(&[(0.1, 0.3)]));
    }

    #[test]
    fn fitting_reduces_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let phis = Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mean: Vec<f64> = (0..n).map(|i| 0.3 + 0.2 * phis.row(i)[0]).collect();
        let seq = TrainingSequence::new(phis, mean, vec![0.05; n]).unwrap();
        let mut w = init_value_function(4, &mut rng).unwrap();
        let before = {
            let (l, _) = loss_value_function(&w, &seq, &[], &ValueLossConfig::default()).unwrap();
            l.regress
        };
        fit_value_function(&mut w, &seq, 100, 0.005, &ValueLossConfig::default(), &mut rng).unwrap();
        let (after, _) = loss_value_function(&w, &seq, &[], &ValueLossConfig::default()).unwrap();
        assert!(after.regress < before * 0.5, "{} -> {}", before, after.regress);
    }
}
