//! Experiment driver: configuration, the meta-train → meta-test pipeline,
//! persisted artifacts and summary reports.
//!
//! One global seed fans out to every component through
//! [`derive_seed`](crate::seed::derive_seed); the output directory never
//! influences numeric results.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::AdapterKind;
use crate::data::{generate_synthetic_task, load_libsvm, LabeledDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::{run_seeds, ClassificationUnroll, MetaTestConfig, Method, RunOutcome};
use crate::gp::interpolate;
use crate::meta::{meta_train, run_finetune_task, task_seed, MetaConfig, MetaReport};
use crate::nn::ModelWeights;
use crate::optim::{learned_optimizer_spec, train_learned_optimizer, LearnedTrainConfig};
use crate::pretrain::{base_model_spec, pretrain_base_model, PretrainConfig};
use crate::seed::{derive_seed, fnv1a};
use crate::stats;
use crate::task::{FinetuneConfig, TaskData, TaskSpec};
use crate::value_fn::predict;

pub const VALUE_FN_FILE: &str = "value_fn.json";
pub const LEARNED_OPT_FILE: &str = "learned_opt.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const META_MANIFEST_FILE: &str = "meta-train-manifest.json";
pub const FINETUNE_MANIFEST_FILE: &str = "finetune-manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// LIBSVM file; the synthetic family is used when it is unset or missing.
    pub libsvm_path: Option<PathBuf>,
    pub num_features: Option<usize>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            libsvm_path: None,
            num_features: None,
            synthetic: SyntheticSpec {
                n: 20_000,
                ..SyntheticSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedConfig {
    /// Train the learned optimizer after the value function.
    pub enabled: bool,
    pub train: LearnedTrainConfig,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            train: LearnedTrainConfig {
                horizon: 50,
                iterations: 60,
                ..LearnedTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed of data, pre-training and meta-training.
    pub seed: u64,
    /// Meta-test seeds; one results row per method and seed.
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub adapter: AdapterKind,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub meta: MetaConfig,
    pub meta_test: MetaTestConfig,
    /// Candidate λ values for metricopt-sgd and metricopt-adam. The one with
    /// the best mean validation metric over `seeds` is used; empty keeps
    /// `meta_test.es.lambda`.
    pub lambda_grid: Vec<f64>,
    pub learned: LearnedConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: (1..=10).collect(),
            methods: vec![Method::LossOnly, Method::MetricOptSgd],
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            adapter: AdapterKind::DynamicBias { dim: 16 },
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig {
                lr: 0.2,
                ..FinetuneConfig::default()
            },
            meta: MetaConfig {
                iterations: 500,
                ..MetaConfig::default()
            },
            meta_test: MetaTestConfig {
                sgd_lr: 0.2,
                ..MetaTestConfig::default()
            },
            lambda_grid: vec![0.1, 0.3, 1.0, 3.0, 10.0, 30.0],
            learned: LearnedConfig::default(),
        }
    }
}

fn prefixed(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => Error::Config {
            field: prefix.to_string(),
            message: other.to_string(),
        },
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<config>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets a dotted key such as `meta.iterations` or `meta_test.es.lambda`.
    /// The value is read as JSON and falls back to a plain string.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::config(key, "not a nested key"))?;
            if !obj.contains_key(*part) && !(i + 1 == parts.len() && obj.is_empty()) {
                return Err(Error::config(key, "unknown key"));
            }
            if i + 1 == parts.len() {
                let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
                obj.insert((*part).to_string(), value);
                break;
            }
            node = obj.get_mut(*part).expect("checked above");
        }
        serde_json::from_value(tree).map_err(|e| Error::config(key, e.to_string()))
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        if self.adapter.dim() == 0 {
            return Err(Error::config("adapter.dim", "must be positive"));
        }
        if let AdapterKind::Film { dim, .. } = self.adapter {
            if dim % 2 != 0 {
                return Err(Error::config(
                    "adapter.dim",
                    "FiLM needs a scale and a shift per feature",
                ));
            }
        }
        let s = &self.data.synthetic;
        if !(s.imbalance > 0.0 && s.imbalance <= 0.5) {
            return Err(Error::config("data.synthetic.imbalance", "must lie in (0, 0.5]"));
        }
        if s.n < 100 || s.p == 0 {
            return Err(Error::config("data.synthetic", "needs n >= 100 and p >= 1"));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::config("pretrain", "batch_size and lr must be positive"));
        }
        prefixed("finetune", self.finetune.validate())?;
        prefixed("meta", self.meta.validate())?;
        prefixed("meta_test", self.meta_test.validate())?;
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("lambda_grid", "entries must be finite and non-negative"));
        }
        let l = &self.learned.train;
        if !(l.variance > 0.0) || !(l.lr > 0.0) || l.pairs == 0 || l.horizon == 0 {
            return Err(Error::config(
                "learned.train",
                "variance, lr, pairs and horizon must be positive",
            ));
        }
        Ok(())
    }

    /// Hash of everything except the output directory.
    pub fn fingerprint(&self) -> u64 {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        fnv1a(&serde_json::to_string(&c).expect("config serializes"))
    }
}

/// Where the task data came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Libsvm(PathBuf),
    Synthetic,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(LabeledDataset, DataSource)> {
    let split_seed = derive_seed(cfg.seed, "dataset", 0);
    match &cfg.data.libsvm_path {
        Some(path) if path.exists() => Ok((
            load_libsvm(path, cfg.data.num_features, split_seed)?,
            DataSource::Libsvm(path.clone()),
        )),
        _ => Ok((
            generate_synthetic_task(&cfg.data.synthetic, split_seed)?,
            DataSource::Synthetic,
        )),
    }
}

/// Loads the data and pre-trains the base model.
pub fn prepare_task(cfg: &ExperimentConfig) -> Result<(TaskSpec, DataSource)> {
    cfg.validate()?;
    let (dataset, source) = load_dataset(cfg)?;
    let spec = base_model_spec(dataset.num_features(), cfg.adapter);
    let theta = pretrain_base_model(
        spec,
        cfg.adapter,
        &dataset.subset(Split::Train),
        &cfg.pretrain,
        derive_seed(cfg.seed, "pretrain", 0),
    )?;
    let task = TaskSpec {
        data: std::sync::Arc::new(TaskData::new(theta, cfg.adapter, &dataset)?),
        finetune: cfg.finetune,
    };
    Ok((task, source))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub data_source: DataSource,
    /// Checkpoint directory a finetune run read from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedSummary {
    pub objective_first: f64,
    pub objective_last: f64,
    pub discarded_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainSummary {
    pub report: MetaReport,
    pub data_source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learned: Option<LearnedSummary>,
    pub wall_time: f64,
}

impl MetaTrainSummary {
    pub fn text(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "meta-iterations {}{}, failed tasks {}\nheld-out |f - M| before {:.5}, after {:.5}\nembedding ordinality (Spearman) {:.3}\n",
            r.iterations,
            if r.untrained { " (untrained)" } else { "" },
            r.failed_tasks,
            r.initial_error,
            r.final_error,
            r.ordinality,
        );
        if let Some(l) = &self.learned {
            s += &format!(
                "learned optimizer objective {:.4} -> {:.4}, discarded pairs {}\n",
                l.objective_first, l.objective_last, l.discarded_pairs
            );
        }
        s
    }
}

fn write_trajectory(path: &Path, traj: &crate::meta::FinetuneTrajectory) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    traj.write_jsonl(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Meta-trains the value function (and optionally the learned optimizer)
/// and writes checkpoints, logs, report and manifest to the output directory.
pub fn cmd_meta_train(cfg: &ExperimentConfig) -> Result<MetaTrainSummary> {
    let start = Instant::now();
    let (task, source) = prepare_task(cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join("holdout"))?;
    let outcome = meta_train(&task, &cfg.meta, cfg.seed)?;
    outcome.weights.save(out.join(VALUE_FN_FILE))?;
    for j in 0..cfg.meta.holdout_tasks {
        let traj = run_finetune_task(&task, crate::meta::holdout_seed(cfg.seed, j))?;
        write_trajectory(&out.join("holdout").join(format!("trajectory-{j}.jsonl")), &traj)?;
    }
    if cfg.meta.offline {
        fs::create_dir_all(out.join("trajectories"))?;
        for i in 1..=cfg.meta.iterations {
            if let Ok(traj) = run_finetune_task(&task, task_seed(cfg.seed, i)) {
                write_trajectory(&out.join("trajectories").join(format!("task-{i}.jsonl")), &traj)?;
            }
        }
    }
    let learned = if cfg.learned.enabled {
        let (w_opt, summary) = train_learned(&task, &outcome.weights, &cfg.learned.train, cfg.seed)?;
        w_opt.save(out.join(LEARNED_OPT_FILE))?;
        Some(summary)
    } else {
        None
    };
    let summary = MetaTrainSummary {
        report: outcome.report,
        data_source: source.clone(),
        learned,
        wall_time: start.elapsed().as_secs_f64(),
    };
    fs::write(
        out.join("meta-report.json"),
        serde_json::to_string_pretty(&summary.report)?,
    )?;
    Manifest {
        command: "meta-train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        data_source: source,
        checkpoint_dir: None,
    }
    .write(&out.join(META_MANIFEST_FILE))?;
    Ok(summary)
}

/// Trains the learned optimizer against a fixed value function on
/// finetuning runs of `task`.
pub fn train_learned(
    task: &TaskSpec,
    value_fn: &ModelWeights<f64>,
    cfg: &LearnedTrainConfig,
    seed: u64,
) -> Result<(ModelWeights<f64>, LearnedSummary)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "learned-init", 0));
    let mut w_opt = ModelWeights::init(learned_optimizer_spec(), &mut rng)?;
    let data = &*task.data;
    let finetune = FinetuneConfig {
        horizon: cfg.horizon,
        ..task.finetune
    };
    let sample = |s: u64| {
        Ok(ClassificationUnroll {
            data,
            finetune,
            seed: s,
        })
    };
    let f = |phi: &[f64]| predict(value_fn, phi);
    let report = train_learned_optimizer(&mut w_opt, &sample, &f, cfg, derive_seed(seed, "learned-es", 0))?;
    let summary = LearnedSummary {
        objective_first: report.objective.first().copied().unwrap_or(f64::NAN),
        objective_last: report.objective.last().copied().unwrap_or(f64::NAN),
        discarded_pairs: report.discarded_pairs,
    };
    Ok((w_opt, summary))
}

/// One meta-test run in the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub run_id: String,
    pub seed: u64,
    pub method: Method,
    pub metric: String,
    /// Test metric in its natural orientation.
    pub raw: f64,
    /// Test metric with lower-is-better orientation.
    pub oriented: f64,
    pub final_loss: f64,
    pub wall_time: f64,
}

impl ResultsRow {
    /// Equality of everything except the wall time.
    pub fn same_result(&self, other: &Self) -> bool {
        self.run_id == other.run_id
            && self.seed == other.seed
            && self.method == other.method
            && self.metric == other.metric
            && self.raw.to_bits() == other.raw.to_bits()
            && self.oriented.to_bits() == other.oriented.to_bits()
            && self.final_loss.to_bits() == other.final_loss.to_bits()
    }
}

pub fn run_id(cfg: &ExperimentConfig, method: Method, seed: u64) -> String {
    format!("{:016x}", derive_seed(cfg.fingerprint(), method.tag(), seed))
}

fn load_weights(dir: &Path, file: &str) -> Result<ModelWeights<f64>> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    ModelWeights::load(path)
}

/// Runs every configured method on every seed, writes per-step logs and
/// appends one row per run to the results table.
pub fn cmd_finetune(cfg: &ExperimentConfig, checkpoint_dir: &Path) -> Result<Vec<ResultsRow>> {
    let (task, source) = prepare_task(cfg)?;
    let value_fn = if cfg.methods.iter().any(|m| m.needs_value_function()) {
        Some(load_weights(checkpoint_dir, VALUE_FN_FILE)?)
    } else {
        None
    };
    let learned = if cfg.methods.contains(&Method::MetricOptLearned) {
        Some(load_weights(checkpoint_dir, LEARNED_OPT_FILE)?)
    } else {
        None
    };
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join("logs"))?;
    let mut rows = Vec::new();
    let mut selections = Vec::new();
    for &method in &cfg.methods {
        let mut meta_test = cfg.meta_test;
        if uses_lambda(method) && !cfg.lambda_grid.is_empty() {
            let sel = select_lambda(&task, method, value_fn.as_ref(), cfg)?;
            meta_test.es.lambda = sel.chosen;
            selections.push(sel);
        }
        let runs = run_seeds(
            &task,
            method,
            value_fn.as_ref(),
            learned.as_ref(),
            &meta_test,
            &cfg.seeds,
        )?;
        for (outcome, wall_time) in runs {
            write_step_log(
                &out.join("logs").join(format!("{}-seed{}.jsonl", method, outcome.seed)),
                &outcome,
            )?;
            rows.push(ResultsRow {
                run_id: run_id(cfg, method, outcome.seed),
                seed: outcome.seed,
                method,
                metric: cfg.finetune.metric.name().to_string(),
                raw: outcome.test_metric.raw,
                oriented: outcome.test_metric.oriented,
                final_loss: outcome.final_loss,
                wall_time,
            });
        }
    }
    append_rows(&out.join(RESULTS_FILE), &rows)?;
    if !selections.is_empty() {
        fs::write(
            out.join("lambda-selection.json"),
            serde_json::to_string_pretty(&selections)?,
        )?;
    }
    Manifest {
        command: "finetune".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        data_source: source,
        checkpoint_dir: Some(checkpoint_dir.to_path_buf()),
    }
    .write(&out.join(FINETUNE_MANIFEST_FILE))?;
    Ok(rows)
}

fn uses_lambda(method: Method) -> bool {
    matches!(method, Method::MetricOptSgd | Method::MetricOptAdam)
}

/// Outcome of choosing λ on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub method: Method,
    pub chosen: f64,
    /// `(λ, mean oriented validation metric)` per candidate.
    pub candidates: Vec<(f64, f64)>,
}

/// Runs `method` for every λ in the grid and keeps the one with the lowest
/// mean oriented validation metric; ties go to the earlier candidate.
pub fn select_lambda(
    task: &TaskSpec,
    method: Method,
    value_fn: Option<&ModelWeights<f64>>,
    cfg: &ExperimentConfig,
) -> Result<LambdaSelection> {
    let val = task.data.metric_set(crate::task::MetricSource::Validation);
    let mut candidates = Vec::with_capacity(cfg.lambda_grid.len());
    for &lambda in &cfg.lambda_grid {
        let mut meta_test = cfg.meta_test;
        meta_test.es.lambda = lambda;
        let runs = run_seeds(task, method, value_fn, None, &meta_test, &cfg.seeds)?;
        let scores = runs
            .iter()
            .map(|(o, _)| Ok(task.data.metric_on(task.finetune.metric, &o.phi, &val)?.oriented))
            .collect::<Result<Vec<f64>>>()?;
        candidates.push((lambda, stats::mean(&scores)));
    }
    let chosen = candidates
        .iter()
        .fold(None::<(f64, f64)>, |best, &c| match best {
            Some(b) if b.1 <= c.1 => Some(b),
            _ => Some(c),
        })
        .map(|c| c.0)
        .ok_or_else(|| Error::config("lambda_grid", "empty"))?;
    Ok(LambdaSelection {
        method,
        chosen,
        candidates,
    })
}

fn write_step_log(path: &Path, outcome: &RunOutcome) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for step in &outcome.steps {
        serde_json::to_writer(&mut out, step)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("results table: {e}"))
}

pub fn append_rows(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// Re-executes the command recorded in a manifest into `output_dir`.
pub fn replay(manifest: &Manifest, output_dir: &Path) -> Result<Vec<ResultsRow>> {
    let mut cfg = manifest.config.clone();
    cfg.output_dir = output_dir.to_path_buf();
    match manifest.command.as_str() {
        "finetune" => {
            let dir = manifest
                .checkpoint_dir
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("finetune manifest lacks a checkpoint directory".into()))?;
            cmd_finetune(&cfg, dir)
        }
        "meta-train" => cmd_meta_train(&cfg).map(|_| Vec::new()),
        other => Err(Error::InvalidArgument(format!("cannot replay command `{other}`"))),
    }
}

/// Per-method statistics over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub method: Method,
    pub runs: usize,
    pub raw_mean: f64,
    pub raw_std: f64,
    pub oriented_mean: f64,
    pub oriented_std: f64,
    pub final_loss_mean: f64,
    /// Mean of `oriented − oriented(loss-only)` over shared seeds.
    pub paired_delta: Option<f64>,
    /// Shared seeds on which this method is strictly better than loss-only.
    pub paired_wins: Option<usize>,
    pub paired_seeds: Option<usize>,
}

pub fn summarize(rows: &[ResultsRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no results rows to report".into()));
    }
    let mut groups: BTreeMap<(String, Method), BTreeMap<u64, &ResultsRow>> = BTreeMap::new();
    for row in rows {
        // later rows for the same run replace earlier ones
        groups
            .entry((row.metric.clone(), row.method))
            .or_default()
            .insert(row.seed, row);
    }
    let mut out = Vec::new();
    for ((metric, method), by_seed) in &groups {
        let col = |f: fn(&ResultsRow) -> f64| by_seed.values().map(|r| f(r)).collect::<Vec<f64>>();
        let (raw, oriented, loss) = (col(|r| r.raw), col(|r| r.oriented), col(|r| r.final_loss));
        let baseline = groups.get(&(metric.clone(), Method::LossOnly));
        let paired: Option<Vec<f64>> = match baseline {
            Some(base) if *method != Method::LossOnly => Some(
                by_seed
                    .iter()
                    .filter_map(|(s, r)| base.get(s).map(|b| r.oriented - b.oriented))
                    .collect(),
            ),
            _ => None,
        };
        out.push(SummaryRow {
            metric: metric.clone(),
            method: *method,
            runs: by_seed.len(),
            raw_mean: stats::mean(&raw),
            raw_std: stats::sample_std(&raw),
            oriented_mean: stats::mean(&oriented),
            oriented_std: stats::sample_std(&oriented),
            final_loss_mean: stats::mean(&loss),
            paired_delta: paired.as_ref().filter(|d| !d.is_empty()).map(|d| stats::mean(d)),
            paired_wins: paired.as_ref().map(|d| d.iter().filter(|&&x| x < 0.0).count()),
            paired_seeds: paired.as_ref().map(Vec::len),
        });
    }
    Ok(out)
}

pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<10} {:<18} {:>4}  {:>19}  {:>19}  {:>10}  {:>10}  {:>6}\n",
        "metric", "method", "runs", "raw mean ± std", "oriented mean ± std", "final loss", "Δ vs loss", "wins"
    );
    for r in summary {
        let delta = r.paired_delta.map_or("-".to_string(), |d| format!("{d:+.5}"));
        let wins = match (r.paired_wins, r.paired_seeds) {
            (Some(w), Some(n)) => format!("{w}/{n}"),
            _ => "-".into(),
        };
        s += &format!(
            "{:<10} {:<18} {:>4}  {:>9.5} ± {:<7.5}  {:>9.5} ± {:<7.5}  {:>10.5}  {:>10}  {:>6}\n",
            r.metric,
            r.method.tag(),
            r.runs,
            r.raw_mean,
            r.raw_std,
            r.oriented_mean,
            r.oriented_std,
            r.final_loss_mean,
            delta,
            wins
        );
    }
    s
}

/// Reads the results table in `dir`, writes `summary.csv` and returns the
/// pretty-printed table.
pub fn cmd_report(dir: &Path) -> Result<(Vec<SummaryRow>, String)> {
    let path = dir.join(RESULTS_FILE);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("no results table in {}", dir.display())));
    }
    let summary = summarize(&read_rows(&path)?)?;
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE)).map_err(csv_error)?;
    for row in &summary {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    let text = format_summary(&summary);
    Ok((summary, text))
}

/// CSV of one loss-only trajectory: sparse observations, the GP posterior
/// and the metric evaluated at every step.
pub fn cmd_gp_check(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let (task, _) = prepare_task(cfg)?;
    let traj = run_finetune_task(&task, seed)?;
    let (trace, params) = interpolate(&traj.observations, traj.horizon())?;
    let metric_set = task.data.metric_set(cfg.finetune.metric_source);
    let mut s = format!(
        "# length_scale={} signal_var={} noise_var={}\nt,observed,gp_mean,gp_std,metric\n",
        params.length_scale, params.signal_var, params.noise_var
    );
    for (j, &t) in trace.steps.iter().enumerate() {
        let observed = traj
            .observations
            .steps()
            .iter()
            .position(|&o| o == t)
            .map_or(String::new(), |k| traj.observations.values()[k].to_string());
        let metric = task
            .data
            .metric_on(cfg.finetune.metric, &traj.phis[t], &metric_set)?
            .oriented;
        s += &format!("{t},{observed},{},{},{metric}\n", trace.mean[j], trace.std[j]);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"seed": 3, "meta": {"iterations": 7}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.meta.iterations, 7);
        assert_eq!(partial.meta.inner_lr, MetaConfig::default().inner_lr);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"meta": {"iters": 7}}"#).is_err());
        assert!(ExperimentConfig::default().with_override("meta.iters", "7").is_err());
    }

    #[test]
    fn overrides_and_field_errors() {
        let cfg = ExperimentConfig::default()
            .with_override("meta_test.es.lambda", "0.25")
            .unwrap()
            .with_override("finetune.metric", "f_measure")
            .unwrap()
            .with_override("methods", r#"["loss-only"]"#)
            .unwrap();
        assert_eq!(cfg.meta_test.es.lambda, 0.25);
        assert_eq!(cfg.methods, vec![Method::LossOnly]);
        let bad = cfg.with_override("finetune.k_fraction", "0").unwrap();
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "finetune.k_fraction"),
            other => panic!("{other:?}"),
        }
        let bad = ExperimentConfig {
            seeds: vec![1, 1],
            ..ExperimentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "seeds"));
    }

    #[test]
    fn fingerprint_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), ExperimentConfig { seed: 1, ..a.clone() }.fingerprint());
    }

    fn row(method: Method, seed: u64, oriented: f64) -> ResultsRow {
        ResultsRow {
            run_id: format!("{method}-{seed}"),
            seed,
            method,
            metric: "MCR".into(),
            raw: oriented,
            oriented,
            final_loss: 0.5,
            wall_time: 0.1,
        }
    }

    #[test]
    fn summary_statistics() {
        let single = summarize(&[row(Method::LossOnly, 1, 0.2)]).unwrap();
        assert_eq!(single[0].oriented_mean, 0.2);
        assert_eq!(single[0].oriented_std, 0.0);
        assert!(single[0].paired_delta.is_none());
        let rows = vec![
            row(Method::LossOnly, 1, 0.20),
            row(Method::LossOnly, 2, 0.30),
            row(Method::MetricOptSgd, 1, 0.10),
            row(Method::MetricOptSgd, 2, 0.35),
        ];
        let s = summarize(&rows).unwrap();
        let m = s.iter().find(|r| r.method == Method::MetricOptSgd).unwrap();
        assert!((m.paired_delta.unwrap() - (-0.1 + 0.05) / 2.0).abs() < 1e-12);
        assert_eq!((m.paired_wins, m.paired_seeds), (Some(1), Some(2)));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        let mut r = row(Method::MetricOptAdam, 9, 0.1 + 0.2);
        r.final_loss = std::f64::consts::PI / 7.0;
        append_rows(&path, &[r.clone()]).unwrap();
        append_rows(&path, &[row(Method::LossOnly, 9, 1.0 / 3.0)]).unwrap();
        let back = read_rows(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].same_result(&r));
        assert_eq!(back[0], r);
    }
}
