//! Oracle suites run by the `selfcheck` command and the acceptance tests.
//!
//! Each suite compares a production code path against an independent
//! reference from [`crate::oracle`] and reports the worst discrepancy.

use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{gp_posterior_raw, RbfParams, SparseObservations, LENGTH_GRID, NOISE_GRID};
use crate::nn::{sgd_step, Activation, MlpSpec, Mode, ModelWeights, OutputActivation, Tensor};
use crate::optim::{
    covariance_trace, es_direction, orthonormal_basis, sample_perturbation, BaseOptimizer, GradientHistory,
    GuidedEsConfig, MetricOptState,
};
use crate::oracle;
use crate::value_fn::{fisher_ratio, fisher_set, ordinal_loss, regression_loss, FisherSet};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error (or other headline statistic) of the suite.
    pub statistic: f64,
    pub summary: String,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:<28} {} ({:.2?})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.summary,
            self.elapsed
        )
    }
}

/// Pre-activations closer to zero than this are treated as sitting on a
/// ReLU kink, where finite differences are meaningless.
const KINK_MARGIN: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
pub const AUTODIFF_TOLERANCE: f64 = 1e-4;

fn random_spec(rng: &mut ChaCha8Rng) -> MlpSpec {
    let depth = rng.random_range(1..=4);
    let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=20)).collect();
    let activation = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::LeakyRelu(rng.random_range(0.01..0.5))
    };
    let mut spec = MlpSpec::new(sizes, activation);
    spec.batchnorm.iter_mut().for_each(|b| *b = rng.random_bool(0.5));
    if rng.random_bool(0.3) {
        spec.output_activation = OutputActivation::Sigmoid;
    }
    spec
}

fn perturb_norms(w: &mut ModelWeights<f64>, rng: &mut ChaCha8Rng) {
    for l in 0..w.spec().hidden_layers() {
        if let Some(bn) = w.norm_mut(l) {
            for g in &mut bn.gamma {
                *g = rng.random_range(0.5..1.5);
            }
            for b in &mut bn.beta {
                *b = rng.random_range(-0.5..0.5);
            }
            for m in &mut bn.running_mean {
                *m = rng.random_range(-0.5..0.5);
            }
            for v in &mut bn.running_var {
                *v = rng.random_range(0.5..2.0);
            }
        }
    }
}

fn clear_of_kinks(w: &ModelWeights<f64>, x: &Tensor<f64>, mode: Mode) -> bool {
    let Ok(cache) = w.forward_cached(x, mode, None) else {
        return false;
    };
    (0..w.spec().hidden_layers()).all(|l| cache.pre_activation(l).data().iter().all(|z| z.abs() > KINK_MARGIN))
}

/// One random network: worst relative error of the reverse pass against
/// central differences over every weight and every input coordinate.
pub fn gradient_check_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (w, x, mode) = loop {
        let spec = random_spec(rng);
        let mut w = ModelWeights::<f64>::init(spec.clone(), rng)?;
        perturb_norms(&mut w, rng);
        let batch = rng.random_range(1..=5);
        let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Eval };
        let x = Tensor::matrix(
            batch,
            spec.input_dim(),
            (0..batch * spec.input_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        if clear_of_kinks(&w, &x, mode) {
            break (w, x, mode);
        }
    };
    let out_dim = w.spec().output_dim();
    let coeffs: Vec<f64> = (0..x.rows() * out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream = Tensor::matrix(x.rows(), out_dim, coeffs.clone())?;
    let objective = |w: &ModelWeights<f64>, x: &Tensor<f64>| -> f64 {
        w.forward(x, mode)
            .map(|y| y.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum())
            .unwrap_or(f64::NAN)
    };
    let cache = w.forward_cached(&x, mode, None)?;
    let back = w.backward(&cache, &upstream, &[])?;

    let params = w.params();
    let mut probe = w.clone();
    let fd_w = oracle::central_difference(
        |p| {
            probe.set_params(p).expect("same length");
            objective(&probe, &x)
        },
        &params,
        FD_STEP,
    );
    let fd_x = oracle::central_difference(
        |v| {
            let xi = Tensor::matrix(x.rows(), x.cols(), v.to_vec()).expect("same shape");
            objective(&w, &xi)
        },
        x.data(),
        FD_STEP,
    );
    Ok(oracle::max_relative_error(&back.weights.flat(), &fd_w)
        .max(oracle::max_relative_error(back.input.data(), &fd_x)))
}

pub fn autodiff_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        worst = worst.max(gradient_check_trial(&mut rng)?);
    }
    Ok(SuiteReport {
        name: "autodiff-finite-difference",
        passed: worst < AUTODIFF_TOLERANCE,
        statistic: worst,
        summary: format!("{trials} networks, max rel. error {worst:.3e} (< {AUTODIFF_TOLERANCE:e})"),
        elapsed: start.elapsed(),
    })
}

pub const GP_TOLERANCE: f64 = 1e-8;
pub const COVARIANCE_TOLERANCE: f64 = 0.01;
pub const ES_COSINE: f64 = 0.99;

fn report(name: &'static str, passed: bool, statistic: f64, summary: String, start: Instant) -> SuiteReport {
    SuiteReport {
        name,
        passed,
        statistic,
        summary,
        elapsed: start.elapsed(),
    }
}

/// GP posterior against a direct dense solve on random sparse observations,
/// plus the check that an extra observation never raises posterior variance.
pub fn gp_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = 50;
    let query: Vec<usize> = (1..=horizon).collect();
    let (mut worst, mut monotone) = (0.0_f64, true);
    for _ in 0..instances {
        let k = rng.random_range(1..=10);
        let mut steps: Vec<usize> = rand::seq::index::sample(&mut rng, horizon, k)
            .iter()
            .map(|i| i + 1)
            .collect();
        steps.sort_unstable();
        let values: Vec<f64> = steps.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let params = RbfParams {
            length_scale: LENGTH_GRID[rng.random_range(0..LENGTH_GRID.len())] * horizon as f64,
            signal_var: rng.random_range(0.01..0.2),
            noise_var: NOISE_GRID[rng.random_range(0..NOISE_GRID.len())],
            jitter: 0.0,
        };
        let obs = SparseObservations::new(steps.clone(), values.clone())?;
        let (mean, var) = gp_posterior_raw(&obs, &params, &query)?;
        let xs: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        for (j, &q) in query.iter().enumerate() {
            let (m, v) = oracle::gp_posterior_direct(
                &xs,
                &values,
                params.length_scale,
                params.signal_var,
                params.noise_var,
                q as f64,
            );
            worst = worst.max((m - mean[j]).abs()).max((v - var[j]).abs());
        }
        // a second instance with one more observation
        let extra = (1..=horizon).find(|s| !steps.contains(s)).unwrap_or(horizon);
        if !steps.contains(&extra) {
            let mut more: Vec<(usize, f64)> = steps.iter().copied().zip(values.iter().copied()).collect();
            more.push((extra, rng.random_range(0.0..1.0)));
            more.sort_by_key(|p| p.0);
            let (s2, v2): (Vec<usize>, Vec<f64>) = more.into_iter().unzip();
            let (_, var2) = gp_posterior_raw(&SparseObservations::new(s2, v2)?, &params, &query)?;
            monotone &= var2.iter().zip(&var).all(|(a, b)| *a <= b + 1e-12);
        }
    }
    Ok(report(
        "gp-direct-solve",
        worst < GP_TOLERANCE && monotone,
        worst,
        format!(
            "{instances} instances, max abs error {worst:.3e} (< {GP_TOLERANCE:e}), monotone information {monotone}"
        ),
        start,
    ))
}

fn random_basis(dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut history = GradientHistory::new(k);
    for _ in 0..k {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        history.push(&g);
    }
    orthonormal_basis(&history)
}

/// Unit trace of the search covariance and a Monte-Carlo match of sampled
/// perturbations against the materialized matrix.
pub fn es_covariance_suite(samples: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace_err = 0.0_f64;
    for dim in [2, 8, 32] {
        for k in [1, 2, 3] {
            let basis = random_basis(dim, k, &mut rng);
            trace_err = trace_err.max((covariance_trace(dim, &basis) - 1.0).abs());
            let sigma = oracle::guided_covariance(dim, &basis);
            trace_err = trace_err.max(((0..dim).map(|i| sigma[i][i]).sum::<f64>() - 1.0).abs());
        }
    }
    let (dim, variance) = (4, 0.01);
    let basis = random_basis(dim, 2, &mut rng);
    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            let d = sample_perturbation(&basis, dim, variance, &mut rng);
            d.iter().map(|x| x / variance.sqrt()).collect()
        })
        .collect();
    let empirical = oracle::second_moment(&draws);
    let exact = oracle::guided_covariance(dim, &basis);
    let cov_err = empirical
        .iter()
        .flatten()
        .zip(exact.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(report(
        "es-covariance",
        trace_err < 1e-12 && cov_err < COVARIANCE_TOLERANCE,
        cov_err,
        format!(
            "max |tr Σ - 1| {trace_err:.1e}, {samples} samples max entry error {cov_err:.4} (< {COVARIANCE_TOLERANCE})"
        ),
        start,
    ))
}

/// The antithetic estimator on a linear function against `2Σa`, and exact
/// zero on a constant function.
pub fn es_estimator_suite(pairs: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let cfg = GuidedEsConfig::default();
    let a: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let phi: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let basis = random_basis(dim, cfg.k, &mut rng);
    let deltas: Vec<Vec<f64>> = (0..pairs)
        .map(|_| sample_perturbation(&basis, dim, cfg.variance, &mut rng))
        .collect();
    let linear = |x: &[f64]| Ok(x.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>());
    let u = es_direction(linear, &phi, &deltas, cfg.variance)?;
    let sigma = oracle::guided_covariance(dim, &basis);
    let expected: Vec<f64> = sigma
        .iter()
        .map(|row| 2.0 * row.iter().zip(&a).map(|(s, q)| s * q).sum::<f64>())
        .collect();
    let cosine = oracle::cosine_similarity(&u, &expected);
    let zero = es_direction(|_| Ok(0.7), &phi, &deltas[..cfg.pairs], cfg.variance)?;
    let exact_zero = zero.iter().all(|&x| x == 0.0);
    Ok(report(
        "es-estimator",
        cosine > ES_COSINE && exact_zero,
        cosine,
        format!("{pairs} pairs, cosine with 2Σa {cosine:.5} (> {ES_COSINE}), constant f gives zero {exact_zero}"),
        start,
    ))
}

/// With `λ = 0` the combined step reproduces plain SGD bit for bit.
pub fn plugin_equivalence_suite(steps: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let target: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let curvature: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    let noise: Vec<Vec<f64>> = (0..steps)
        .map(|_| (0..dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let grad = |phi: &[f64], t: usize| -> Vec<f64> {
        (0..dim)
            .map(|i| curvature[i] * (phi[i] - target[i]).tanh() + noise[t][i])
            .collect()
    };
    let cfg = GuidedEsConfig {
        lambda: 0.0,
        ..GuidedEsConfig::default()
    };
    let mut state = MetricOptState::new(dim, cfg, BaseOptimizer::Sgd { momentum: 0.0 }, false, seed)?;
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let mut identical = true;
    let lr = 0.1;
    for t in 0..steps {
        let g = grad(&a, t);
        state.step(
            &mut a,
            &g,
            |_| Err(Error::InvalidArgument("queried with λ = 0".into())),
            lr,
        )?;
        let g = grad(&b, t);
        sgd_step(&mut b, &g, lr)?;
        identical &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let queries = state.queries();
    Ok(report(
        "plug-in-equivalence",
        identical && queries == 0,
        if identical { 0.0 } else { 1.0 },
        format!("{steps} steps bitwise identical {identical}, value-function queries {queries}"),
        start,
    ))
}

/// Identities of the value-function objective.
pub fn loss_identities_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 50;
    let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mean: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let sigma = rng.random_range(0.01..0.3);
    let mae = pred.iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let equal = regression_loss(&pred, &mean, &vec![sigma; n]) == mae;
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let d = rng.random_range(0.0..3.0);
            (d, d)
        })
        .collect();
    let ln2_err = (ordinal_loss(&pairs) - std::f64::consts::LN_2).abs();
    let std: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.5)).collect();
    let c = rng.random_range(0.1..10.0);
    let scaled: Vec<f64> = std.iter().map(|s| s * c).collect();
    let scale_err = (regression_loss(&pred, &mean, &std) - regression_loss(&pred, &mean, &scaled)).abs();
    Ok(report(
        "value-loss-identities",
        equal && ln2_err <= 1e-12 && scale_err <= 1e-12,
        ln2_err.max(scale_err),
        format!("equal σ gives MAE exactly {equal}, |L_oe - ln 2| {ln2_err:.1e}, rescaling change {scale_err:.1e}"),
        start,
    ))
}

/// Threshold behavior of the Fisher-ratio sets.
pub fn fisher_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let cases = [
        (fisher_ratio(0.8_f64, 0.1, 0.4, 0.1), FisherSet::Negative),
        (fisher_ratio(0.3_f64, 0.1, 0.3, 0.2), FisherSet::Positive),
        (fisher_ratio(1.0_f64, 0.5, 0.0, 0.5), FisherSet::Negative),
    ];
    let ratios_ok = (cases[0].0 - 8.0_f64).abs() < 1e-12 && cases[1].0 == 0.0 && cases[2].0 == 2.0;
    let sets_ok = cases.iter().all(|&(r, set)| fisher_set(r) == set)
        && fisher_set(8.0_f64) == FisherSet::Negative
        && fisher_set(0.0_f64) == FisherSet::Positive
        && fisher_set(2.0_f64) == FisherSet::Negative;
    Ok(report(
        "fisher-sets",
        ratios_ok && sets_ok,
        0.0,
        format!(
            "r = 8 negative, r = 0 positive, r = 2 negative: {}",
            ratios_ok && sets_ok
        ),
        start,
    ))
}

/// Every suite at the sizes used by the acceptance checks.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        autodiff_suite(100, seed)?,
        gp_suite(50, seed)?,
        es_covariance_suite(100_000, seed)?,
        es_estimator_suite(100_000, seed)?,
        plugin_equivalence_suite(100, seed)?,
        loss_identities_suite(seed)?,
        fisher_suite()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in [
            autodiff_suite(10, 1).unwrap(),
            gp_suite(10, 1).unwrap(),
            es_covariance_suite(20_000, 1).unwrap(),
            es_estimator_suite(20_000, 1).unwrap(),
            plugin_equivalence_suite(30, 1).unwrap(),
            loss_identities_suite(1).unwrap(),
            fisher_suite().unwrap(),
        ] {
            assert!(r.passed, "{}", r.line());
        }
    }
}
