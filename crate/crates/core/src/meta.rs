//! Meta-training of the value function.
//!
//! Each meta-iteration finetunes a randomly initialized `φ` with the
//! surrogate loss alone, queries the metric at a few steps, interpolates
//! the metric with a GP, fits a copy of the value function to the trajectory
//! and moves the meta weights toward the copy (first-order Reptile).

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{interpolate, observation_steps, SparseObservations};
use crate::nn::{sgd_step, AdamConfig, AdamState, ModelWeights, Tensor};
use crate::seed::derive_seed;
use crate::stats;
use crate::task::TaskSpec;
use crate::value_fn::{
    calibrate_running_stats, embedding_ordinality, fit_value_function, init_value_function, loss_value_function,
    mine_triplets, prediction_error, sample_anchors, TrainingSequence, ValueLossConfig, ANCHOR_BATCH,
};

/// Abort meta-training after this many failed tasks in a row.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

/// A loss-only finetuning run with sparse metric observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrajectory {
    /// `φ_0..φ_T`.
    pub phis: Vec<Vec<f64>>,
    /// Mini-batch loss of step `t = 1..T`, evaluated at `φ_{t−1}`.
    pub losses: Vec<f64>,
    /// Lower-is-better metric at a subset of steps `t ∈ 1..T` (value of `φ_t`).
    pub observations: SparseObservations<f64>,
}

impl FinetuneTrajectory {
    pub fn horizon(&self) -> usize {
        self.losses.len()
    }

    /// `φ_1..φ_T` paired with the GP-interpolated metric.
    pub fn training_sequence(&self) -> Result<TrainingSequence<f64>> {
        let horizon = self.horizon();
        let d = self.phis[0].len();
        let rows: Vec<f64> = self.phis[1..].iter().flatten().copied().collect();
        let phis = Tensor::matrix(horizon, d, rows)?;
        let (trace, _) = interpolate(&self.observations, horizon)?;
        TrainingSequence::from_trace(phis, &trace)
    }

    /// One JSON object per line: `{t, phi, loss, metric}`; `t = 0` holds `φ_0`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let obs = &self.observations;
        for (t, phi) in self.phis.iter().enumerate() {
            let metric = obs.steps().iter().position(|&s| s == t).map(|k| obs.values()[k]);
            let rec = TrajectoryRecord {
                t,
                phi: phi.clone(),
                loss: if t == 0 { None } else { Some(self.losses[t - 1]) },
                metric,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut phis = Vec::new();
        let mut losses = Vec::new();
        let (mut steps, mut values) = (Vec::new(), Vec::new());
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.t != phis.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected step {}, found {}", phis.len(), rec.t),
                });
            }
            if let Some(l) = rec.loss {
                losses.push(l);
            }
            if let Some(m) = rec.metric {
                steps.push(rec.t);
                values.push(m);
            }
            phis.push(rec.phi);
        }
        if phis.len() != losses.len() + 1 {
            return Err(Error::InvalidArgument("trajectory log is missing losses".into()));
        }
        Ok(Self {
            phis,
            losses,
            observations: SparseObservations::new(steps, values)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryRecord {
    t: usize,
    phi: Vec<f64>,
    loss: Option<f64>,
    metric: Option<f64>,
}

/// `T` steps of loss-only SGD from a random `φ_0`, querying the metric at
/// `⌈K·T⌉` steps.
pub fn run_finetune_task(task: &TaskSpec, seed: u64) -> Result<FinetuneTrajectory> {
    let cfg = &task.finetune;
    cfg.validate()?;
    let data = &task.data;
    let mut phi = data.initial_phi(cfg.phi0_std, seed);
    let mut sched_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "schedule", 0));
    let obs_steps = observation_steps(cfg.horizon, cfg.k_fraction, cfg.schedule, &mut sched_rng);
    let metric_set = data.metric_set(cfg.metric_source);
    let mut phis = vec![phi.clone()];
    let mut losses = Vec::with_capacity(cfg.horizon);
    let mut values = Vec::with_capacity(obs_steps.len());
    let mut next_obs = obs_steps.iter().peekable();
    for t in 1..=cfg.horizon {
        let rows = data.batch_rows(seed, t, cfg.batch_size, cfg.balanced);
        let (loss, grad) = data.loss_and_grad(&phi, &rows)?;
        sgd_step(&mut phi, &grad, cfg.lr)?;
        losses.push(loss);
        if next_obs.next_if_eq(&&t).is_some() {
            values.push(data.metric_on(cfg.metric, &phi, &metric_set)?.oriented);
        }
        phis.push(phi.clone());
    }
    Ok(FinetuneTrajectory {
        phis,
        losses,
        observations: SparseObservations::new(obs_steps, values)?,
    })
}

/// `w ← w + η (inner − w)` over all weights; running statistics are copied
/// from `inner`.
pub fn reptile_update(w: &mut ModelWeights<f64>, inner: &ModelWeights<f64>, eta: f64) -> Result<()> {
    if w.spec() != inner.spec() {
        return Err(Error::InvalidArgument(
            "reptile update between different architectures".into(),
        ));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!(
            "meta learning rate {eta} outside [0, 1]"
        )));
    }
    let outer = w.params();
    let updated: Vec<f64> = outer
        .iter()
        .zip(inner.params())
        .map(|(&a, b)| if eta == 1.0 { b } else { a + eta * (b - a) })
        .collect();
    w.set_params(&updated)?;
    w.copy_running_stats(inner)
}

/// Linear decay from `eta0` at iteration 1 toward 0: `η_i = eta0 (1 − (i−1)/N)`.
pub fn meta_learning_rate(eta0: f64, i: usize, iterations: usize) -> f64 {
    eta0 * (1.0 - (i - 1) as f64 / iterations as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Meta-iterations `N`.
    pub iterations: usize,
    /// Value-function steps per task.
    pub inner_steps: usize,
    /// Inner learning rate `α`.
    pub inner_lr: f64,
    /// Initial meta learning rate, decayed linearly to 0.
    pub eta0: f64,
    pub loss: ValueLossConfig,
    /// Held-out trajectories for the prediction-error report.
    pub holdout_tasks: usize,
    /// Pool all trajectories and train once instead of Reptile.
    pub offline: bool,
    /// Replace the running statistics copied from the last task with their
    /// average over all meta-training trajectories.
    pub calibrate_stats: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inner_steps: 50,
            inner_lr: 0.005,
            eta0: 1.0,
            loss: ValueLossConfig::default(),
            holdout_tasks: 5,
            offline: false,
            calibrate_stats: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) {
            return Err(Error::config("inner_lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta0) {
            return Err(Error::config("eta0", "must lie in [0, 1]"));
        }
        if !(self.loss.gamma > 0.0) {
            return Err(Error::config("gamma", "must be positive"));
        }
        Ok(())
    }
}

/// Diagnostics of a meta-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    pub iterations: usize,
    pub failed_tasks: usize,
    /// Mean held-out `|f(φ_t) − M̂_t|` before and after meta-training.
    pub initial_error: f64,
    pub final_error: f64,
    /// Mean Spearman correlation of embedding distance and metric gap on
    /// the held-out trajectories.
    pub ordinality: f64,
    /// `L_v` of the inner fit, one entry per successful task.
    pub inner_losses: Vec<f64>,
    pub untrained: bool,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub weights: ModelWeights<f64>,
    pub report: MetaReport,
    pub holdout: Vec<TrainingSequence<f64>>,
}

/// Produces finetuning trajectories; implementations must be pure in `seed`.
pub trait TaskSampler: Sync {
    fn dim(&self) -> usize;
    fn trajectory(&self, seed: u64) -> Result<FinetuneTrajectory>;
}

impl TaskSampler for TaskSpec {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn trajectory(&self, seed: u64) -> Result<FinetuneTrajectory> {
        run_finetune_task(self, seed)
    }
}

fn holdout_error(w: &ModelWeights<f64>, holdout: &[TrainingSequence<f64>]) -> Result<f64> {
    let errs = holdout
        .iter()
        .map(|s| prediction_error(w, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats::mean(&errs))
}

/// Trajectory seeds of meta-iteration `i` (1-based) and of held-out task `j`.
pub fn task_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, "meta-task", i as u64)
}

pub fn holdout_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, "holdout-task", j as u64)
}

/// Runs meta-training. Trajectories are collected in parallel; updates are
/// applied in iteration order, so the result depends only on `seed`.
pub fn meta_train(sampler: &dyn TaskSampler, cfg: &MetaConfig, seed: u64) -> Result<MetaOutcome> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "value-init", 0));
    let mut w: ModelWeights<f64> = init_value_function(sampler.dim(), &mut init_rng)?;
    let holdout: Vec<TrainingSequence<f64>> = (0..cfg.holdout_tasks)
        .into_par_iter()
        .map(|j| sampler.trajectory(holdout_seed(seed, j))?.training_sequence())
        .collect::<Result<_>>()?;
    let initial_error = if holdout.is_empty() {
        f64::NAN
    } else {
        holdout_error(&w, &holdout)?
    };

    let collected: Vec<Result<TrainingSequence<f64>>> = (1..=cfg.iterations)
        .into_par_iter()
        .map(|i| sampler.trajectory(task_seed(seed, i))?.training_sequence())
        .collect();

    let mut failures = 0;
    let mut consecutive = 0;
    let mut inner_losses = Vec::new();
    let mut pool = Vec::new();
    for (idx, seq) in collected.into_iter().enumerate() {
        let i = idx + 1;
        let seq = match seq {
            Ok(s) => {
                consecutive = 0;
                s
            }
            Err(e) => {
                failures += 1;
                consecutive += 1;
                if consecutive >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::Diverged(format!(
                        "{consecutive} consecutive task failures, last: {e}"
                    )));
                }
                continue;
            }
        };
        if cfg.offline {
            pool.push(seq);
            continue;
        }
        let mut inner = w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "inner", i as u64));
        if let Some(loss) = fit_value_function(&mut inner, &seq, cfg.inner_steps, cfg.inner_lr, &cfg.loss, &mut rng)? {
            inner_losses.push(loss.total);
        }
        reptile_update(&mut w, &inner, meta_learning_rate(cfg.eta0, i, cfg.iterations))?;
        pool.push(seq);
    }
    if cfg.offline && !pool.is_empty() {
        inner_losses = fit_offline(&mut w, &pool, cfg, seed)?;
    }
    if cfg.calibrate_stats {
        calibrate_running_stats(&mut w, &pool)?;
    }

    let final_error = if holdout.is_empty() {
        f64::NAN
    } else {
        holdout_error(&w, &holdout)?
    };
    let ordinality = stats::mean(
        &holdout
            .iter()
            .map(|s| embedding_ordinality(&w, s))
            .collect::<Result<Vec<_>>>()?,
    );
    Ok(MetaOutcome {
        weights: w,
        report: MetaReport {
            iterations: cfg.iterations,
            failed_tasks: failures,
            initial_error,
            final_error,
            ordinality,
            inner_losses,
            untrained: cfg.iterations == 0,
        },
        holdout,
    })
}

/// One pass of `N · n_inner` Adam steps, each on a trajectory drawn from the
/// stored pool, with a single optimizer state.
fn fit_offline(
    w: &mut ModelWeights<f64>,
    pool: &[TrainingSequence<f64>],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "offline", 0));
    let mut adam = AdamState::new(w.num_params());
    let adam_cfg = AdamConfig::default();
    let mut losses = Vec::new();
    for _ in 0..pool.len() * cfg.inner_steps {
        let seq = &pool[rand::Rng::random_range(&mut rng, 0..pool.len())];
        let triplets = if cfg.loss.ordinal {
            let anchors = sample_anchors(seq.len(), ANCHOR_BATCH, &mut rng);
            mine_triplets(w, seq, &anchors, crate::nn::Mode::Train)?
        } else {
            Vec::new()
        };
        let (loss, cache) = loss_value_function(w, seq, &triplets, &cfg.loss)?;
        let mut params = w.params();
        adam.step(&mut params, &loss.grads, cfg.inner_lr, &adam_cfg)?;
        w.set_params(&params)?;
        w.update_running_stats(&cache);
        losses.push(loss.total);
    }
    Ok(losses)
}
