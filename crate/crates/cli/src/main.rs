use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use hfedckd::checkpoint::{load_model, CheckpointError};
use hfedckd::config::{preset, ConfigError, ExperimentConfig};
use hfedckd::data::DataError;
use hfedckd::metrics::{self, MetricsError};
use hfedckd::protocol::{self, Experiment, ProtocolError, RoundRecord};

#[derive(Parser)]
#[command(name = "hfedckd", version, about = "Heterogeneous federated distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Override a config key, e.g. `--set rounds=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Use 1000 rounds instead of the default 100.
    #[arg(long)]
    long_rounds: bool,
    /// Suppress per-round progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a named preset (S@10 .. S@500).
    Preset {
        name: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the participation-rate sweep on UCI-HAR.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write encoder features of a saved model for external projection.
    DumpFeatures {
        /// Config whose dataset supplies the samples.
        config: PathBuf,
        /// Model checkpoint, e.g. `runs/S@50/global.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "global")]
        tag: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn apply(mut cfg: ExperimentConfig, o: &Overrides) -> Result<ExperimentConfig> {
    if o.long_rounds {
        cfg.rounds = hfedckd::config::LONG_ROUNDS;
    }
    for s in &o.set {
        cfg = cfg.with_override(s)?;
    }
    Ok(cfg)
}

fn load_config(path: &Path, sets: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    for s in sets {
        cfg = cfg.with_override(s)?;
    }
    Ok(cfg)
}

fn execute(cfg: ExperimentConfig, quiet: bool) -> Result<()> {
    let out = cfg.output_dir.clone();
    let mut exp = Experiment::new(cfg)?;
    let mut progress = |r: &RoundRecord| {
        if !quiet {
            eprintln!(
                "round {:>4}  client acc {:.4} ± {:.4}  global acc {:.4}  distill {}",
                r.round,
                r.client_acc_mean,
                r.client_acc_std,
                r.global_acc,
                metrics::fmt_sig(r.distill_loss)
            );
        }
    };
    let run = protocol::run_rounds(&mut exp, &mut progress)?;
    metrics::write_metrics(&run.records, &exp.cfg, &out.join("metrics.csv"))?;
    metrics::write_timing(&run.records, &out.join("timing.csv"))?;
    protocol::save_server(&exp, &out)?;
    let s = &run.summary;
    println!(
        "{}: {} rounds, client acc {:.4} ± {:.4}, global acc {:.4}, mean participation {:.3}",
        out.display(),
        s.rounds,
        s.client_acc_mean,
        s.client_acc_std,
        s.global_acc,
        s.mean_participation
    );
    Ok(())
}

fn dump(config: &Path, sets: &[String], checkpoint: &Path, count: usize, tag: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config, sets)?;
    let (_, test) = protocol::load_datasets(&cfg)?;
    let (model, _) = load_model(checkpoint)?;
    metrics::dump_features(&[(tag.to_string(), &model)], &test, count, cfg.seed, out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = apply(load_config(&config, &[])?, &overrides)?;
            execute(cfg, overrides.quiet)
        }
        Command::Preset { name, overrides } => {
            for cfg in preset(&name, false)? {
                execute(apply(cfg, &overrides)?, overrides.quiet)?;
            }
            Ok(())
        }
        Command::Sweep { overrides } => {
            for cfg in preset("jr-sweep", false)? {
                execute(apply(cfg, &overrides)?, overrides.quiet)?;
            }
            Ok(())
        }
        Command::DumpFeatures {
            config,
            checkpoint,
            count,
            out,
            tag,
            set,
        } => dump(&config, &set, &checkpoint, count, &tag, &out),
    }
}

/// 2: configuration, 3: data, 4: computation, 5: i/o.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 3;
        }
        if let Some(p) = cause.downcast_ref::<ProtocolError>() {
            return match p {
                ProtocolError::Config(_) => 2,
                ProtocolError::Data(_) => 3,
                _ => 4,
            };
        }
        if cause.is::<MetricsError>() || cause.is::<CheckpointError>() || cause.is::<std::io::Error>() {
            return 5;
        }
    }
    4
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
