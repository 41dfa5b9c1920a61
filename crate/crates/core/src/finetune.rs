//! Meta-test finetuning: loss-only baselines and value-function guided runs
//! on a fresh adapter initialization.
//!
//! All methods run with seed `s` share `φ_0` and the mini-batch of every
//! step, so per-seed differences between methods come from the update rule.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricValue;
use crate::nn::{AdamConfig, ModelWeights};
use crate::optim::{unroll, BaseOptimizer, GuidedEsConfig, MetricOptState, UnrollTask};
use crate::scalar::norm;
use crate::seed::derive_seed;
use crate::task::{FinetuneConfig, TaskData, TaskSpec};
use crate::value_fn::predict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LossOnly,
    #[serde(rename = "metricopt-sgd")]
    MetricOptSgd,
    #[serde(rename = "metricopt-adam")]
    MetricOptAdam,
    #[serde(rename = "metricopt-learned")]
    MetricOptLearned,
    MetricOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::LossOnly,
        Method::MetricOptSgd,
        Method::MetricOptAdam,
        Method::MetricOptLearned,
        Method::MetricOnly,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::LossOnly => "loss-only",
            Method::MetricOptSgd => "metricopt-sgd",
            Method::MetricOptAdam => "metricopt-adam",
            Method::MetricOptLearned => "metricopt-learned",
            Method::MetricOnly => "metric-only",
        }
    }

    pub fn needs_value_function(self) -> bool {
        self != Method::LossOnly
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTestConfig {
    pub es: GuidedEsConfig,
    /// Step size of loss-only, metricopt-sgd and metric-only runs.
    pub sgd_lr: f64,
    pub adam_lr: f64,
    /// Log the validation metric every this many steps; 0 disables it.
    pub log_metric_every: usize,
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        Self {
            es: GuidedEsConfig::default(),
            sgd_lr: 0.05,
            adam_lr: 0.005,
            log_metric_every: 10,
        }
    }
}

impl MetaTestConfig {
    pub fn validate(&self) -> Result<()> {
        self.es.validate()?;
        if !(self.sgd_lr > 0.0) {
            return Err(Error::config("sgd_lr", "must be positive"));
        }
        if !(self.adam_lr > 0.0) {
            return Err(Error::config("adam_lr", "must be positive"));
        }
        Ok(())
    }
}

/// One line of the per-step finetuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub loss: f64,
    pub u_norm: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub phi: Vec<f64>,
    /// Metric of the final `φ` on the test split.
    pub test_metric: MetricValue,
    /// Cross-entropy of the final `φ` over the whole training split.
    pub final_loss: f64,
    pub value_queries: u64,
    pub steps: Vec<StepLog>,
}

/// Seed of all randomness in the meta-test run with user seed `seed`.
pub fn run_seed(seed: u64) -> u64 {
    derive_seed(seed, "meta-test", 0)
}

/// A classification task with the batches of one seeded run, for unrolling
/// the learned optimizer. Unroll step `t` uses the batch of finetuning step
/// `t + 1`.
#[derive(Debug, Clone)]
pub struct ClassificationUnroll<'a> {
    pub data: &'a TaskData,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

impl UnrollTask for ClassificationUnroll<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn initial(&self) -> Vec<f64> {
        self.data.initial_phi(self.finetune.phi0_std, self.seed)
    }

    fn loss_and_grad(&self, phi: &[f64], step: usize) -> Result<(f64, Vec<f64>)> {
        let rows = self
            .data
            .batch_rows(self.seed, step + 1, self.finetune.batch_size, self.finetune.balanced);
        self.data.loss_and_grad(phi, &rows)
    }
}

/// Finetunes `φ` for `T` steps with `method`.
///
/// `value_fn` is required by every method except loss-only, and
/// `learned_opt` additionally by metricopt-learned.
pub fn run_meta_test(
    task: &TaskSpec,
    method: Method,
    value_fn: Option<&ModelWeights<f64>>,
    learned_opt: Option<&ModelWeights<f64>>,
    cfg: &MetaTestConfig,
    seed: u64,
) -> Result<RunOutcome> {
    cfg.validate()?;
    task.finetune.validate()?;
    let ft = &task.finetune;
    let data = &*task.data;
    let rs = run_seed(seed);
    let f_weights = match (method.needs_value_function(), value_fn) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!(
                "method {method} needs a value function"
            )))
        }
        (_, w) => w,
    };
    let f = |phi: &[f64]| -> Result<f64> {
        match f_weights {
            Some(w) => predict(w, phi),
            None => Ok(0.0),
        }
    };
    let val = data.metric_set(ft.metric_source);
    let log_metric = |t: usize, phi: &[f64]| -> Result<Option<f64>> {
        if cfg.log_metric_every > 0 && (t.is_multiple_of(cfg.log_metric_every) || t == ft.horizon) {
            Ok(Some(data.metric_on(ft.metric, phi, &val)?.raw))
        } else {
            Ok(None)
        }
    };

    let (phi, steps, queries) = if method == Method::MetricOptLearned {
        let w_opt = learned_opt
            .ok_or_else(|| Error::InvalidArgument("metricopt-learned needs learned optimizer weights".into()))?;
        let task_view = ClassificationUnroll {
            data,
            finetune: *ft,
            seed: rs,
        };
        let run = unroll(w_opt, &task_view, &f, ft.horizon)?;
        let mut steps = Vec::with_capacity(ft.horizon);
        for t in 1..=ft.horizon {
            let step = &run.phis[t];
            let du: Vec<f64> = step.iter().zip(&run.phis[t - 1]).map(|(a, b)| a - b).collect();
            let (_, grad) = task_view.loss_and_grad(&run.phis[t - 1], t - 1)?;
            steps.push(StepLog {
                t,
                loss: run.losses[t - 1],
                u_norm: norm(&du),
                grad_norm: norm(&grad),
                metric: log_metric(t, step)?,
            });
        }
        let queries = run.metrics.len() as u64;
        (run.phis.last().cloned().unwrap_or_default(), steps, queries)
    } else {
        let (base, lr, lambda, metric_only) = match method {
            Method::LossOnly => (BaseOptimizer::Sgd { momentum: 0.0 }, cfg.sgd_lr, 0.0, false),
            Method::MetricOptSgd => (BaseOptimizer::Sgd { momentum: 0.0 }, cfg.sgd_lr, cfg.es.lambda, false),
            Method::MetricOptAdam => (
                BaseOptimizer::Adam(AdamConfig::default()),
                cfg.adam_lr,
                cfg.es.lambda,
                false,
            ),
            Method::MetricOnly => (BaseOptimizer::Sgd { momentum: 0.0 }, cfg.sgd_lr, cfg.es.lambda, true),
            Method::MetricOptLearned => unreachable!(),
        };
        let es = GuidedEsConfig { lambda, ..cfg.es };
        let mut state = MetricOptState::new(data.dim(), es, base, metric_only, derive_seed(rs, "guided-es", 0))?;
        let mut phi = data.initial_phi(ft.phi0_std, rs);
        let mut steps = Vec::with_capacity(ft.horizon);
        for t in 1..=ft.horizon {
            let rows = data.batch_rows(rs, t, ft.batch_size, ft.balanced);
            let (loss, grad) = data.loss_and_grad(&phi, &rows)?;
            let info = state.step(&mut phi, &grad, f, lr)?;
            steps.push(StepLog {
                t,
                loss,
                u_norm: info.u_norm,
                grad_norm: info.grad_norm,
                metric: log_metric(t, &phi)?,
            });
        }
        (phi, steps, state.queries())
    };

    Ok(RunOutcome {
        method,
        seed,
        test_metric: data.metric_on(ft.metric, &phi, &data.test)?,
        final_loss: data.loss_on(&phi, &data.train)?,
        phi,
        value_queries: queries,
        steps,
    })
}

/// Runs `method` once per seed, in parallel; outcomes keep seed order.
pub fn run_seeds(
    task: &TaskSpec,
    method: Method,
    value_fn: Option<&ModelWeights<f64>>,
    learned_opt: Option<&ModelWeights<f64>>,
    cfg: &MetaTestConfig,
    seeds: &[u64],
) -> Result<Vec<(RunOutcome, f64)>> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&s| {
            let start = Instant::now();
            let out = run_meta_test(task, method, value_fn, learned_opt, cfg, s)?;
            Ok((out, start.elapsed().as_secs_f64()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterKind;
    use crate::data::{generate_synthetic_task, Split, SyntheticSpec};
    use crate::nn::sgd_step;
    use crate::pretrain::{base_model_spec, pretrain_base_model, PretrainConfig};
    use crate::value_fn::init_value_function;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn task() -> TaskSpec {
        let spec = SyntheticSpec {
            n: 600,
            p: 6,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic_task(&spec, 2).unwrap();
        let kind = AdapterKind::DynamicBias { dim: 4 };
        let pcfg = PretrainConfig {
            steps: 60,
            ..PretrainConfig::default()
        };
        let theta = pretrain_base_model(base_model_spec(6, kind), kind, &ds.subset(Split::Train), &pcfg, 1).unwrap();
        TaskSpec {
            data: Arc::new(TaskData::new(theta, kind, &ds).unwrap()),
            finetune: FinetuneConfig {
                horizon: 10,
                ..FinetuneConfig::default()
            },
        }
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.tag()));
        }
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn loss_only_is_plain_sgd_on_shared_batches() {
        let t = task();
        let cfg = MetaTestConfig::default();
        let out = run_meta_test(&t, Method::LossOnly, None, None, &cfg, 3).unwrap();
        let rs = run_seed(3);
        let mut phi = t.data.initial_phi(t.finetune.phi0_std, rs);
        for step in 1..=10 {
            let rows = t.data.batch_rows(rs, step, 64, true);
            let (_, g) = t.data.loss_and_grad(&phi, &rows).unwrap();
            sgd_step(&mut phi, &g, cfg.sgd_lr).unwrap();
        }
        assert_eq!(out.phi, phi);
        assert_eq!(out.value_queries, 0);
        assert_eq!(out.steps.len(), 10);
        assert!(out.steps[9].metric.is_some() && out.steps[4].metric.is_none());
    }

    #[test]
    fn guided_runs_query_twice_per_pair() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: ModelWeights<f64> = init_value_function(4, &mut rng).unwrap();
        let cfg = MetaTestConfig::default();
        let out = run_meta_test(&t, Method::MetricOptSgd, Some(&w), None, &cfg, 1).unwrap();
        assert_eq!(out.value_queries, 10 * 2 * 3);
        assert!(run_meta_test(&t, Method::MetricOptSgd, None, None, &cfg, 1).is_err());
        assert!(run_meta_test(&t, Method::MetricOptLearned, Some(&w), None, &cfg, 1).is_err());
        let a = run_meta_test(&t, Method::MetricOptAdam, Some(&w), None, &cfg, 1).unwrap();
        assert_eq!(
            a,
            run_meta_test(&t, Method::MetricOptAdam, Some(&w), None, &cfg, 1).unwrap()
        );
    }

    #[test]
    fn zero_lambda_matches_loss_only() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: ModelWeights<f64> = init_value_function(4, &mut rng).unwrap();
        let mut cfg = MetaTestConfig::default();
        cfg.es.lambda = 0.0;
        let a = run_meta_test(&t, Method::MetricOptSgd, Some(&w), None, &cfg, 5).unwrap();
        let b = run_meta_test(&t, Method::LossOnly, None, None, &cfg, 5).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.test_metric, b.test_metric);
    }

    #[test]
    fn learned_runs_follow_the_optimizer() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: ModelWeights<f64> = init_value_function(4, &mut rng).unwrap();
        let zero = ModelWeights::zeros(crate::optim::learned_optimizer_spec()).unwrap();
        let out = run_meta_test(
            &t,
            Method::MetricOptLearned,
            Some(&w),
            Some(&zero),
            &MetaTestConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(out.phi, t.data.initial_phi(t.finetune.phi0_std, run_seed(2)));
    }
}
