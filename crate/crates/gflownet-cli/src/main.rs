//! Experiment runner: train samplers, evaluate checkpoints at several search
//! budgets, and verify the exact-flow oracle on small environments.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gflownet::config::RunConfig;
use gflownet::run::{cmd_eval, cmd_oracle, cmd_train};

#[derive(Parser)]
#[command(name = "gflownet", version, about = "GFlowNet training and search experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per a run config; writes metrics.csv, manifest and checkpoints.
    Train {
        /// Path to the key=value run config.
        config: PathBuf,
    },
    /// Evaluate a checkpoint at one or more search budgets.
    Eval {
        /// Path to a checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Search budgets to sweep; 0 evaluates the plain policy.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        rounds: Vec<u32>,
        /// Metric override: l1 or spearman.
        #[arg(long)]
        metric: Option<String>,
        /// Sample-count override for the metric.
        #[arg(long)]
        samples: Option<usize>,
        /// Additional key=value config overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// CSV to append to (default: metrics.csv beside the checkpoint).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Build the exact oracle and run its invariant suite; non-zero exit on
    /// any violation.
    Oracle {
        /// Path to the key=value run config.
        config: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config } => {
            let cfg = RunConfig::from_file(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let outcome = cmd_train(&cfg)?;
            println!(
                "run {} finished: {} metric rows, checkpoint {}",
                cfg.run_id(),
                outcome.rows.len(),
                outcome.final_checkpoint.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            rounds,
            metric,
            samples,
            set,
            csv,
        } => {
            let mut overrides: Vec<(String, String)> = Vec::new();
            if let Some(m) = metric {
                overrides.push(("eval.metric".into(), m));
            }
            if let Some(s) = samples {
                overrides.push(("eval.samples".into(), s.to_string()));
            }
            for kv in set {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got {kv:?}");
                };
                overrides.push((k.trim().into(), v.trim().into()));
            }
            let outcome = cmd_eval(&checkpoint, &rounds, &overrides, csv)?;
            for row in &outcome.rows {
                if row.metric.starts_with("throughput") {
                    let rate = if row.wall_s > 0.0 {
                        row.value / row.wall_s
                    } else {
                        f64::INFINITY
                    };
                    println!("{} = {:.1} trajectories/s", row.metric, rate);
                } else {
                    println!("{} = {}", row.metric, row.value);
                }
            }
            println!("rows appended to {}", outcome.csv_path.display());
        }
        Cmd::Oracle { config } => {
            let cfg = RunConfig::from_file(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let outcome = cmd_oracle(&cfg)?;
            println!("states = {}", outcome.states);
            println!("edges = {}", outcome.edges);
            println!("terminals = {}", outcome.terminals);
            println!("log Z = {}", outcome.log_z);
            println!("Z = {}", outcome.z);
            println!(
                "invariants satisfied (max trajectory-balance residual {:.3e})",
                outcome.max_tb_residual
            );
            if let Some(path) = outcome.terminals_path {
                println!("terminal table written to {}", path.display());
            }
        }
    }
    Ok(())
}
