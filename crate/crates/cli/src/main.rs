//! Command-line front end: dataset generation, training, evaluation,
//! gradient checks and multi-seed runs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mlrn_core::data::{generate_dataset, read_dataset, write_dataset};
use mlrn_core::harness::{
    gradcheck_suite, multi_seed_run, report_for, train, Checkpoint, GradScale, RunConfig,
    GRADCHECK_TOLERANCE,
};

#[derive(Parser)]
#[command(
    name = "mlrn",
    version,
    about = "Multi-layer relation networks on micro procedural matrices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a micro-PGM dataset file.
    GenData {
        /// Config file; only `generator.*` keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Overrides `generator.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint and per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training dataset; overrides `train_data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation dataset; overrides `val_data`.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_metrics: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Per-category accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit precision.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        scale: String,
    },
    /// Train once per seed and summarize the spread of final accuracies.
    Multiseed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg =
        RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut entries = Vec::new();
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override {o:?} is not key=value");
        };
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    cfg.apply(&entries)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => load_config(&p, &[])?.generator,
                None => Default::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let samples = generate_dataset(&cfg, count)?;
            write_dataset(&samples, &out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            config,
            data,
            val,
            out_checkpoint,
            out_metrics,
            overrides,
        } => {
            let mut cfg = load_config(&config, &overrides)?.train;
            if let Some(p) = data {
                cfg.train_data = p;
            }
            if let Some(p) = val {
                cfg.val_data = p;
            }
            if let Some(p) = out_checkpoint {
                cfg.checkpoint = p;
            }
            if let Some(p) = out_metrics {
                cfg.metrics = p;
            }
            let out = train(&cfg)?;
            let last = out.rows.last().context("no epoch completed")?;
            println!(
                "trained {} epochs: training accuracy {:.4}, validation accuracy {:.4}",
                last.epoch, last.training_acc, last.validation_acc
            );
        }
        Command::Eval {
            checkpoint,
            data,
            report,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let samples = read_dataset(&data)?;
            let table = report_for(&ck, &samples)?.to_string();
            print!("{table}");
            if let Some(p) = report {
                std::fs::write(&p, &table).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Gradcheck { scale } => {
            let scale: GradScale = scale.parse()?;
            let cases = gradcheck_suite(scale)?;
            let mut ok = true;
            for c in &cases {
                ok &= c.passed();
                println!(
                    "{:<28} max rel error {:.3e}  ({} elements, {:.2}s)  {}",
                    c.name,
                    c.report.max_rel_error,
                    c.report.checked,
                    c.seconds,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "tolerance {GRADCHECK_TOLERANCE:e}: {}",
                if ok { "all passed" } else { "failures" }
            );
            return Ok(ok);
        }
        Command::Multiseed {
            config,
            seeds,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?.train;
            let train_set = read_dataset(&cfg.train_data)?;
            let val_set = read_dataset(&cfg.val_data)?;
            let summary = multi_seed_run(&cfg, &train_set, &val_set, seeds)?;
            print!("{summary}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
