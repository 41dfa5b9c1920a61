use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metricopt::finetune::Method;
use metricopt::harness::{self, ExperimentConfig, Manifest};
use metricopt::selfcheck;

#[derive(Parser)]
#[command(
    name = "metricopt",
    version,
    about = "Metric-aware finetuning with a meta-learned value function"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; unspecified keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set meta.iterations=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (shorthand for `--set output_dir=...`).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let Some((key, value)) = kv.split_once('=') else {
                bail!("override `{kv}` is not KEY=VALUE");
            };
            cfg = cfg.with_override(key.trim(), value.trim())?;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the value function and write its checkpoint.
    MetaTrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finetune with the given methods on every configured seed.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding the meta-train checkpoints.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Methods to run; defaults to the config's list.
        #[arg(long, short, value_delimiter = ',')]
        method: Vec<Method>,
    },
    /// Summarize the results table of a run directory.
    Report { dir: PathBuf },
    /// Dump a GP-interpolated metric trace as CSV.
    GpCheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Finetuning seed of the traced trajectory.
        #[arg(long, default_value_t = 0)]
        trajectory_seed: u64,
    },
    /// Re-run a recorded command from its manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run the invariant suites; exits non-zero if any fails.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_config(cfg: &ExperimentConfig) -> ExitCode {
    println!("{}", cfg.to_json());
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::MetaTrain { config } => {
            let cfg = config.resolve()?;
            if config.print_config {
                return Ok(print_config(&cfg));
            }
            let summary = harness::cmd_meta_train(&cfg)?;
            print!("{}", summary.text());
            println!(
                "checkpoint written to {}",
                cfg.output_dir.join(harness::VALUE_FN_FILE).display()
            );
        }
        Command::Finetune {
            config,
            checkpoint,
            method,
        } => {
            let mut cfg = config.resolve()?;
            if !method.is_empty() {
                cfg.methods = method;
            }
            if config.print_config {
                return Ok(print_config(&cfg));
            }
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.output_dir.clone());
            let rows = harness::cmd_finetune(&cfg, &checkpoint)?;
            println!(
                "{} rows appended to {}",
                rows.len(),
                cfg.output_dir.join(harness::RESULTS_FILE).display()
            );
            let (_, text) = harness::cmd_report(&cfg.output_dir)?;
            print!("{text}");
        }
        Command::Report { dir } => {
            let (_, text) = harness::cmd_report(&dir)?;
            print!("{text}");
        }
        Command::GpCheck {
            config,
            trajectory_seed,
        } => {
            let cfg = config.resolve()?;
            if config.print_config {
                return Ok(print_config(&cfg));
            }
            print!("{}", harness::cmd_gp_check(&cfg, trajectory_seed)?);
        }
        Command::Replay { manifest, output } => {
            let manifest = Manifest::load(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let rows = harness::replay(&manifest, &output)?;
            println!(
                "replayed `{}` into {} ({} rows)",
                manifest.command,
                output.display(),
                rows.len()
            );
        }
        Command::Selfcheck { seed } => {
            let reports = selfcheck::run_all(seed)?;
            for r in &reports {
                println!("{}", r.line());
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
