//! Gaussian-process interpolation of sparse metric observations over steps.
//!
//! The prior mean is the average of the observations, the kernel is RBF and
//! reported deviations are predictive (they include the observation noise),
//! floored at [`SIGMA_FLOOR`]. Means are clamped to `[0, 1]`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const MIN_JITTER: f64 = 1e-10;
pub const MAX_JITTER: f64 = 1e-6;
pub const NOISE_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];
/// Length scales as fractions of the horizon `T`, smallest first.
pub const LENGTH_GRID: [f64; 4] = [1.0 / 20.0, 1.0 / 10.0, 1.0 / 5.0, 1.0 / 2.0];
const MIN_SIGNAL_VAR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseObservations<S> {
    steps: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> SparseObservations<S> {
    /// Steps must be `≥ 1` and strictly increasing.
    pub fn new(steps: Vec<usize>, values: Vec<S>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(Error::shape("observations", steps.len(), values.len()));
        }
        if steps.is_empty() {
            return Err(Error::InvalidArgument("no metric observations".into()));
        }
        if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "observation steps must be >= 1 and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric observation"));
        }
        Ok(Self { steps, values })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    fn mean(&self) -> S {
        self.values.iter().copied().sum::<S>() / S::from_usize(self.len()).unwrap()
    }

    fn variance(&self) -> S {
        let m = self.mean();
        self.values.iter().map(|&v| (v - m) * (v - m)).sum::<S>() / S::from_usize(self.len()).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
    /// Initial diagonal jitter; escalated up to [`MAX_JITTER`] on failure.
    pub jitter: f64,
}

impl RbfParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.length_scale, self.signal_var, self.noise_var]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
            && self.jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid RBF parameters {self:?}")))
        }
    }

    /// Fallback used when there are too few observations to fit.
    pub fn default_for(horizon: usize) -> Self {
        Self {
            length_scale: (horizon as f64 / 10.0).max(1.0),
            signal_var: MIN_SIGNAL_VAR,
            noise_var: 1e-3,
            jitter: 0.0,
        }
    }

    fn kernel<S: Scalar>(&self, a: usize, b: usize) -> S {
        let d = a as f64 - b as f64;
        S::lit(self.signal_var * (-d * d / (2.0 * self.length_scale * self.length_scale)).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedTrace<S> {
    pub steps: Vec<usize>,
    pub mean: Vec<S>,
    /// Predictive standard deviation, at least [`SIGMA_FLOOR`].
    pub std: Vec<S>,
}

impl<S: Scalar> InterpolatedTrace<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `t,mean,std` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean,std\n");
        for ((t, m), s) in self.steps.iter().zip(&self.mean).zip(&self.std) {
            out.push_str(&format!("{t},{m},{s}\n"));
        }
        out
    }
}

/// Lower-triangular Cholesky factor, row-major; `None` if not positive definite.
fn cholesky<S: Scalar>(a: &[S], n: usize) -> Option<Vec<S>> {
    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > S::zero()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L x = b` in place.
fn forward_solve<S: Scalar>(l: &[S], n: usize, b: &mut [S]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place.
fn backward_solve<S: Scalar>(l: &[S], n: usize, b: &mut [S]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

struct Factored<S> {
    chol: Vec<S>,
    /// `K⁻¹ (y − m)`.
    alpha: Vec<S>,
    centered: Vec<S>,
    prior: S,
}

fn factor<S: Scalar>(obs: &SparseObservations<S>, params: &RbfParams) -> Result<Factored<S>> {
    params.validate()?;
    let n = obs.len();
    let mut gram = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = params.kernel(obs.steps[i], obs.steps[j]);
        }
        gram[i * n + i] += S::lit(params.noise_var);
    }
    let mut jitter = params.jitter;
    let chol = loop {
        let mut a = gram.clone();
        for i in 0..n {
            a[i * n + i] += S::lit(jitter);
        }
        if let Some(l) = cholesky(&a, n) {
            break l;
        }
        if jitter >= MAX_JITTER {
            return Err(Error::Factorization { jitter });
        }
        jitter = if jitter < MIN_JITTER {
            MIN_JITTER
        } else {
            (jitter * 10.0).min(MAX_JITTER)
        };
    };
    let prior = obs.mean();
    let centered: Vec<S> = obs.values.iter().map(|&v| v - prior).collect();
    let mut alpha = centered.clone();
    forward_solve(&chol, n, &mut alpha);
    backward_solve(&chol, n, &mut alpha);
    Ok(Factored {
        chol,
        alpha,
        centered,
        prior,
    })
}

/// Posterior mean and latent variance (before flooring or clamping).
pub fn gp_posterior_raw<S: Scalar>(
    obs: &SparseObservations<S>,
    params: &RbfParams,
    query: &[usize],
) -> Result<(Vec<S>, Vec<S>)> {
    let f = factor(obs, params)?;
    let n = obs.len();
    let mut means = Vec::with_capacity(query.len());
    let mut vars = Vec::with_capacity(query.len());
    for &q in query {
        let kstar: Vec<S> = obs.steps.iter().map(|&s| params.kernel(s, q)).collect();
        let mean = f.prior + kstar.iter().zip(&f.alpha).map(|(&a, &b)| a * b).sum::<S>();
        let mut v = kstar;
        forward_solve(&f.chol, n, &mut v);
        let explained: S = v.iter().map(|&x| x * x).sum();
        means.push(mean);
        vars.push(S::lit(params.signal_var) - explained);
    }
    Ok((means, vars))
}

/// Dense posterior at `query`, reported as clamped means and floored
/// predictive deviations.
pub fn gp_posterior<S: Scalar>(
    obs: &SparseObservations<S>,
    params: &RbfParams,
    query: &[usize],
) -> Result<InterpolatedTrace<S>> {
    let (means, vars) = gp_posterior_raw(obs, params, query)?;
    let noise = S::lit(params.noise_var);
    let floor = S::lit(SIGMA_FLOOR);
    Ok(InterpolatedTrace {
        steps: query.to_vec(),
        mean: means.into_iter().map(|m| m.max(S::zero()).min(S::one())).collect(),
        std: vars
            .into_iter()
            .map(|v| (v + noise).max(S::zero()).sqrt().max(floor))
            .collect(),
    })
}

/// Log marginal likelihood of the observations under `params`.
pub fn log_marginal_likelihood<S: Scalar>(obs: &SparseObservations<S>, params: &RbfParams) -> Result<S> {
    let f = factor(obs, params)?;
    let n = obs.len();
    let fit: S = f.centered.iter().zip(&f.alpha).map(|(&a, &b)| a * b).sum();
    let logdet: S = (0..n).map(|i| f.chol[i * n + i].ln()).sum::<S>() * S::lit(2.0);
    let norm = S::from_usize(n).unwrap() * S::lit((2.0 * std::f64::consts::PI).ln());
    Ok(-(fit + logdet + norm) / S::lit(2.0))
}

/// Grid search by marginal likelihood; ties go to the longer length scale.
/// Fewer than three observations return [`RbfParams::default_for`].
pub fn select_hyperparams<S: Scalar>(obs: &SparseObservations<S>, horizon: usize) -> RbfParams {
    let fallback = RbfParams::default_for(horizon);
    if obs.len() < 3 {
        return fallback;
    }
    let signal_var = obs.variance().as_f64().max(MIN_SIGNAL_VAR);
    let mut best: Option<(f64, RbfParams)> = None;
    // longest first so that strict improvement keeps the smoothest on ties
    for frac in LENGTH_GRID.iter().rev() {
        for &noise_var in &NOISE_GRID {
            let params = RbfParams {
                length_scale: (frac * horizon as f64).max(1.0),
                signal_var,
                noise_var,
                jitter: 0.0,
            };
            let Ok(lml) = log_marginal_likelihood(obs, &params) else {
                continue;
            };
            let lml = lml.as_f64();
            if best.is_none_or(|(b, _)| lml > b) {
                best = Some((lml, params));
            }
        }
    }
    best.map_or(fallback, |(_, p)| p)
}

/// Fits hyperparameters and interpolates over steps `1..=horizon`.
pub fn interpolate<S: Scalar>(
    obs: &SparseObservations<S>,
    horizon: usize,
) -> Result<(InterpolatedTrace<S>, RbfParams)> {
    let params = select_hyperparams(obs, horizon);
    let query: Vec<usize> = (1..=horizon).collect();
    Ok((gp_posterior(obs, &params, &query)?, params))
}

/// Where along a trajectory the metric is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSchedule {
    /// `K` distinct steps drawn uniformly without replacement.
    Random,
    /// `K` evenly spaced steps ending at `T`.
    Stride,
}

/// Number of metric queries for a horizon: `⌈fraction · T⌉`, at least one.
pub fn observation_count(horizon: usize, fraction: f64) -> usize {
    ((fraction * horizon as f64).ceil() as usize).clamp(1, horizon.max(1))
}

/// Sorted observation steps in `1..=horizon`.
pub fn observation_steps<R: Rng + ?Sized>(
    horizon: usize,
    fraction: f64,
    schedule: MetricSchedule,
    rng: &mut R,
) -> Vec<usize> {
    let k = observation_count(horizon, fraction);
    let mut steps: Vec<usize> = match schedule {
        MetricSchedule::Random => index::sample(rng, horizon, k).iter().map(|i| i + 1).collect(),
        MetricSchedule::Stride => (1..=k).map(|j| (j * horizon).div_ceil(k)).collect(),
    };
    steps.sort_unstable();
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::gp_posterior_direct;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(l: f64, s: f64, n: f64) -> RbfParams {
        RbfParams {
            length_scale: l,
            signal_var: s,
            noise_var: n,
            jitter: 0.0,
        }
    }

    #[test]
    fn single_observation_is_interpolated() {
        let obs = SparseObservations::new(vec![5], vec![0.3]).unwrap();
        let tr = gp_posterior(&obs, &params(2.0, 0.1, 1e-12), &[5]).unwrap();
        assert!((tr.mean[0] - 0.3_f64).abs() < 1e-12);
        assert_eq!(tr.std[0], SIGMA_FLOOR);
    }

    #[test]
    fn symmetric_midpoint() {
        let obs = SparseObservations::new(vec![2, 8], vec![0.2, 0.6]).unwrap();
        let tr = gp_posterior(&obs, &params(3.0, 0.05, 1e-4), &[5]).unwrap();
        assert!((tr.mean[0] - 0.4_f64).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_solve() {
        let steps = [3usize, 9, 14];
        let values = [0.42, 0.31, 0.35];
        let p = params(4.0, 0.02, 1e-3);
        let obs = SparseObservations::new(steps.to_vec(), values.to_vec()).unwrap();
        let q: Vec<usize> = (1..=20).collect();
        let (m, v) = gp_posterior_raw(&obs, &p, &q).unwrap();
        let s: Vec<f64> = steps.iter().map(|&t| t as f64).collect();
        for (i, &t) in q.iter().enumerate() {
            let (om, ov) = gp_posterior_direct(&s, &values, 4.0, 0.02, 1e-3, t as f64);
            assert!((m[i] - om).abs() < 1e-8);
            assert!((v[i] - ov).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_observations_prefer_smoothest() {
        let obs = SparseObservations::new(vec![1, 10, 20, 40], vec![0.3; 4]).unwrap();
        let p = select_hyperparams(&obs, 50);
        assert_eq!(p.length_scale, 25.0);
    }

    #[test]
    fn slow_trend_selects_smallest_noise() {
        let steps: Vec<usize> = (1..=10).map(|k| 10 * k).collect();
        let values: Vec<f64> = steps
            .iter()
            .enumerate()
            .map(|(i, &t)| 0.2 + 0.004 * t as f64 + 1e-5 * ((i * 7) as f64).sin())
            .collect();
        let obs = SparseObservations::new(steps, values).unwrap();
        let p = select_hyperparams(&obs, 100);
        assert_eq!(p.noise_var, 1e-4);
    }

    #[test]
    fn few_observations_fall_back() {
        let obs = SparseObservations::new(vec![1, 4], vec![0.1, 0.2]).unwrap();
        assert_eq!(select_hyperparams(&obs, 50), RbfParams::default_for(50));
    }

    #[test]
    fn rejects_bad_observations() {
        assert!(SparseObservations::new(vec![2, 2], vec![0.1, 0.2]).is_err());
        assert!(SparseObservations::new(vec![0], vec![0.1]).is_err());
        assert!(SparseObservations::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn schedules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(observation_count(50, 0.05), 3);
        assert_eq!(
            observation_steps(50, 1.0, MetricSchedule::Random, &mut rng),
            (1..=50).collect::<Vec<_>>()
        );
        assert_eq!(
            observation_steps(10, 0.3, MetricSchedule::Stride, &mut rng),
            vec![4, 7, 10]
        );
        let r = observation_steps(100, 0.05, MetricSchedule::Random, &mut rng);
        assert_eq!(r.len(), 5);
        assert!(r.windows(2).all(|w| w[0] < w[1]) && r[0] >= 1 && r[4] <= 100);
    }

    proptest! {
        #[test]
        fn variance_bounded_and_monotone(
            raw in prop::collection::btree_map(1usize..60, 0.0f64..1.0, 2..9),
            l in 1.0f64..20.0,
            noise_idx in 0usize..3,
            q in 1usize..60,
        ) {
            let steps: Vec<usize> = raw.keys().copied().collect();
            let values: Vec<f64> = raw.values().copied().collect();
            let p = params(l, 0.05, NOISE_GRID[noise_idx]);
            let full = SparseObservations::new(steps.clone(), values.clone()).unwrap();
            let fewer = SparseObservations::new(steps[1..].to_vec(), values[1..].to_vec()).unwrap();
            let (_, v_full) = gp_posterior_raw(&full, &p, &[q]).unwrap();
            let (_, v_fewer) = gp_posterior_raw(&fewer, &p, &[q]).unwrap();
            prop_assert!(v_full[0] <= v_fewer[0] + 1e-12);
            prop_assert!(v_full[0] <= p.signal_var + 1e-15);
            let tr = gp_posterior(&full, &p, &[q]).unwrap();
            prop_assert!(tr.std[0] >= SIGMA_FLOOR);
            prop_assert!(tr.std[0] * tr.std[0] <= p.signal_var + p.noise_var + 1e-12);
        }
    }
}
