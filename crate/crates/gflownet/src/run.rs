//! Batch run orchestration: the train / eval / oracle commands behind the
//! CLI. A run writes its resolved config, a manifest, a metrics CSV and
//! checkpoints into the output directory; reruns with the same config and
//! seed produce byte-identical metrics (the wall_s column excepted).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;


use thiserror::Error;

use crate::config::{Algo, ConfigError, EnvSettings, MetricKind, ReplayModeKind, RunConfig};
use crate::env::{Bitseq, Env, EnvError, EnvState, Hypergrid};
use crate::ments::{self, MentsConfig, MentsError, MentsPolicy};
use crate::metrics::{
    estimate_log_ptheta, l1_distance, spearman, MetricsError, MetricsRecord, MetricsWriter,
    SoftmaxPolicy,
};
use crate::nn::{
    Checkpoint, Mlp, NnError, QFunction, RngState, CHECKPOINT_SCHEMA_VERSION,
};
use crate::numerics::{seeded_rng, seeded_rng_indexed};
use crate::oracle::{OracleError, OracleTables};
use crate::replay::{ReplayBuffer, ReplayMode};
use crate::softdqn::{
    sample_softmax_trajectories, SoftDqnConfig, SoftDqnError, SoftDqnTrainer, TrainMode,
};
use crate::subtb::{PolicyHead, SubTbError, SubTbTrainer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    SoftDqn(#[from] SoftDqnError),
    #[error(transparent)]
    SubTb(#[from] SubTbError),
    #[error(transparent)]
    Ments(#[from] MentsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Worker cap: GFLOW_THREADS if set, otherwise the machine's parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("GFLOW_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Run `chunks` independent work items on the worker pool and collect the
/// results in chunk order. The chunk decomposition is fixed, so results do
/// not depend on the number of threads.
pub fn run_chunked<T, E, F>(chunks: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let threads = worker_count().min(chunks).max(1);
    if threads == 1 {
        return (0..chunks).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, E>>>> =
        Mutex::new((0..chunks).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= chunks {
                    break;
                }
                let r = f(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("all chunks ran"))
        .collect()
}

fn chunk_sizes(total: usize, chunks: usize) -> Vec<usize> {
    let base = total / chunks;
    let extra = total % chunks;
    (0..chunks)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

/// Everything a run needs besides the trainers.
pub struct World {
    pub env: Arc<dyn Env>,
    pub bitseq: Option<Arc<Bitseq>>,
    pub oracle: Option<Arc<OracleTables>>,
    /// (terminal state, reward) pairs of the evaluation test set.
    pub test_set: Option<Arc<Vec<(EnvState, f64)>>>,
}

pub fn build_world(cfg: &RunConfig, need_oracle: bool) -> Result<World, RunError> {
    let (env, bitseq): (Arc<dyn Env>, Option<Arc<Bitseq>>) = match &cfg.env {
        EnvSettings::Hypergrid(g) => (Arc::new(Hypergrid::new(g.clone())?), None),
        EnvSettings::Bitseq(b) => {
            let bs = Arc::new(Bitseq::new(b.clone())?);
            (bs.clone(), Some(bs))
        }
    };
    let oracle = if need_oracle || cfg.eval.metric == MetricKind::L1 {
        Some(Arc::new(OracleTables::exact_flows(&*env, cfg.oracle_cap)?))
    } else {
        None
    };
    let test_set = if cfg.eval.metric == MetricKind::Spearman {
        let bs = bitseq
            .as_ref()
            .ok_or_else(|| RunError::Invalid("spearman requires the bitseq env".into()))?;
        let mut set = Vec::new();
        for bits in bs.modes().build_test_set(cfg.eval.test_seed) {
            let state = bs.terminal_from_bits(&bits);
            let reward = bs.modes().reward_of_bits(&bits);
            set.push((state, reward));
        }
        Some(Arc::new(set))
    } else {
        None
    };
    Ok(World {
        env,
        bitseq,
        oracle,
        test_set,
    })
}

/// How evaluation samples trajectories / scores paths.
pub enum EvalPolicy<'a> {
    Vanilla { net: &'a Mlp },
    Ments { q: &'a dyn QFunction, cfg: MentsConfig },
}

/// Terminal-visit counts of `samples` trajectories drawn from the policy.
/// Work is split over a fixed set of chunks with per-chunk RNG streams.
pub fn terminal_counts(
    env: &dyn Env,
    policy: &EvalPolicy,
    samples: usize,
    eval_seed: u64,
) -> Result<HashMap<Box<[u8]>, u64>, RunError> {
    let chunks = 32.min(samples.max(1));
    let sizes = chunk_sizes(samples, chunks);
    let maps = run_chunked(chunks, |c| -> Result<HashMap<Box<[u8]>, u64>, RunError> {
        let mut rng = seeded_rng_indexed(eval_seed, "eval-traj", c as u64);
        let mut counts: HashMap<Box<[u8]>, u64> = HashMap::new();
        match policy {
            EvalPolicy::Vanilla { net } => {
                let mut left = sizes[c];
                while left > 0 {
                    let block = left.min(512);
                    let trajs = sample_softmax_trajectories(env, net, block, 0.0, &mut rng)?;
                    for t in &trajs {
                        *counts
                            .entry(t.terminal().key().to_vec().into_boxed_slice())
                            .or_default() += 1;
                    }
                    left -= block;
                }
            }
            EvalPolicy::Ments { q, cfg } => {
                for _ in 0..sizes[c] {
                    let (traj, _) = ments::sample_trajectory(env, *q, cfg, &mut rng)?;
                    *counts
                        .entry(traj.terminal().key().to_vec().into_boxed_slice())
                        .or_default() += 1;
                }
            }
        }
        Ok(counts)
    })?;
    let mut merged: HashMap<Box<[u8]>, u64> = HashMap::new();
    for m in maps {
        for (k, v) in m {
            *merged.entry(k).or_default() += v;
        }
    }
    Ok(merged)
}

/// L1 distance between the policy's terminal distribution and R/Z.
pub fn eval_l1(
    env: &dyn Env,
    oracle: &OracleTables,
    policy: &EvalPolicy,
    samples: usize,
    eval_seed: u64,
) -> Result<f64, RunError> {
    let counts = terminal_counts(env, policy, samples, eval_seed)?;
    Ok(l1_distance(&counts, oracle)?)
}

/// Spearman correlation between test-set rewards and Monte Carlo estimates
/// of the policy's sampling log-probabilities. Each string gets its own RNG
/// stream, so the result is independent of the chunking.
pub fn eval_spearman(
    env: &dyn Env,
    test_set: &[(EnvState, f64)],
    policy: &EvalPolicy,
    backward_samples: usize,
    eval_seed: u64,
) -> Result<f64, RunError> {
    let chunks = 16.min(test_set.len().max(1));
    let sizes = chunk_sizes(test_set.len(), chunks);
    let starts: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s;
            Some(start)
        })
        .collect();
    let estimates = run_chunked(chunks, |c| -> Result<Vec<f64>, RunError> {
        let mut out = Vec::with_capacity(sizes[c]);
        for i in starts[c]..starts[c] + sizes[c] {
            let (x, _) = &test_set[i];
            let mut rng = seeded_rng_indexed(eval_seed, "eval-ptheta", i as u64);
            let est = match policy {
                EvalPolicy::Vanilla { net } => {
                    let eval = SoftmaxPolicy { q: *net as &dyn QFunction };
                    estimate_log_ptheta(env, x, &eval, backward_samples, &mut rng)?
                }
                EvalPolicy::Ments { q, cfg } => {
                    let eval = MentsPolicy {
                        q: *q,
                        cfg: *cfg,
                        seed: eval_seed,
                    };
                    estimate_log_ptheta(env, x, &eval, backward_samples, &mut rng)?
                }
            };
            out.push(est);
        }
        Ok(out)
    })?;
    let flat: Vec<f64> = estimates.into_iter().flatten().collect();
    let rewards: Vec<f64> = test_set.iter().map(|(_, r)| *r).collect();
    Ok(spearman(&rewards, &flat)?)
}

fn build_id() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_manifest(cfg: &RunConfig, world: &World, out_dir: &Path) -> Result<(), RunError> {
    let mode_distinct = world
        .bitseq
        .as_ref()
        .map(|b| b.modes().distinct_count() as u64);
    let manifest = serde_json::json!({
        "run_id": cfg.run_id(),
        "build_id": build_id(),
        "seed": cfg.seed,
        "algo": cfg.algo.as_str(),
        "env": cfg.env.name(),
        "mode_distinct_count": mode_distinct,
        "config": cfg.echo(),
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

enum AnyTrainer {
    SoftDqn(SoftDqnTrainer),
    SubTb(SubTbTrainer),
}

impl AnyTrainer {
    fn counters(&self) -> (u64, u64, u64) {
        match self {
            AnyTrainer::SoftDqn(t) => (t.iteration, t.trajectories, t.reward_calls),
            AnyTrainer::SubTb(t) => (t.iteration, t.trajectories, t.reward_calls),
        }
    }

    fn train_iteration(&mut self) -> Result<f64, RunError> {
        Ok(match self {
            AnyTrainer::SoftDqn(t) => t.train_iteration()?.loss,
            AnyTrainer::SubTb(t) => t.train_iteration()?.loss,
        })
    }

    fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let (net, adam, rng, iteration) = match self {
            AnyTrainer::SoftDqn(t) => (&t.online, &t.adam, &t.rng, t.iteration),
            AnyTrainer::SubTb(t) => (&t.net, &t.adam, &t.rng, t.iteration),
        };
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            env_config: cfg.echo(),
            algo: cfg.algo.as_str().to_string(),
            layer_sizes: net.sizes.clone(),
            activation: net.activation,
            net: net.clone(),
            adam: adam.clone(),
            rng: RngState::capture(rng),
            iteration,
        }
    }
}

fn ments_config(cfg: &RunConfig) -> Result<MentsConfig, RunError> {
    Ok(MentsConfig::new(cfg.ments.rounds, cfg.ments.eps)?
        .with_reward_access(cfg.ments.terminal_reward_access))
}

fn evaluate(
    cfg: &RunConfig,
    world: &World,
    trainer: &AnyTrainer,
    eval_seed: u64,
) -> Result<f64, RunError> {
    let search = ments_config(cfg)?;
    match trainer {
        AnyTrainer::SoftDqn(t) => {
            let policy = if cfg.ments.use_mode.at_inference() {
                EvalPolicy::Ments {
                    q: &t.online,
                    cfg: search,
                }
            } else {
                EvalPolicy::Vanilla { net: &t.online }
            };
            evaluate_policy(cfg, world, &policy, eval_seed)
        }
        AnyTrainer::SubTb(t) => {
            let policy = EvalPolicy::Vanilla { net: &t.net };
            evaluate_policy(cfg, world, &policy, eval_seed)
        }
    }
}

fn evaluate_policy(
    cfg: &RunConfig,
    world: &World,
    policy: &EvalPolicy,
    eval_seed: u64,
) -> Result<f64, RunError> {
    match cfg.eval.metric {
        MetricKind::L1 => {
            let oracle = world
                .oracle
                .as_ref()
                .ok_or_else(|| RunError::Invalid("l1 metric needs the exact oracle".into()))?;
            eval_l1(&*world.env, oracle, policy, cfg.eval.samples, eval_seed)
        }
        MetricKind::Spearman => {
            let test = world
                .test_set
                .as_ref()
                .ok_or_else(|| RunError::Invalid("spearman metric needs a test set".into()))?;
            eval_spearman(
                &*world.env,
                test,
                policy,
                cfg.eval.ptheta_samples,
                eval_seed,
            )
        }
    }
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub rows: Vec<MetricsRecord>,
}

/// Train per the config, writing config echo, manifest, metrics.csv and
/// checkpoints into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, RunError> {
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| RunError::Invalid("train needs the out=<dir> key".into()))?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.echo_text())?;

    let world = build_world(cfg, false)?;
    write_manifest(cfg, &world, &out_dir)?;

    let trainer_rng = seeded_rng(cfg.seed, "trainer");
    let mut trainer = match cfg.algo {
        Algo::SoftDqn => {
            let mode = if cfg.ments.use_mode.at_training() {
                TrainMode::MentsTargets(ments_config(cfg)?)
            } else {
                match cfg.replay.mode {
                    ReplayModeKind::None => TrainMode::OnPolicy,
                    ReplayModeKind::Uniform => TrainMode::Replay {
                        buffer: ReplayBuffer::new(cfg.replay.capacity, ReplayMode::Uniform),
                        beta0: cfg.replay.beta0,
                        horizon: cfg.train.iters,
                    },
                    ReplayModeKind::Prioritized => TrainMode::Replay {
                        buffer: ReplayBuffer::new(
                            cfg.replay.capacity,
                            ReplayMode::Prioritized {
                                alpha: cfg.replay.alpha,
                            },
                        ),
                        beta0: cfg.replay.beta0,
                        horizon: cfg.train.iters,
                    },
                }
            };
            AnyTrainer::SoftDqn(SoftDqnTrainer::new(
                Arc::clone(&world.env),
                &cfg.hidden_sizes(),
                SoftDqnConfig {
                    batch: cfg.train.batch,
                    lr: cfg.train.lr,
                    target_period: cfg.train.target_period,
                    loss: cfg.train.loss,
                    explore_eps: cfg.train.explore_eps,
                },
                mode,
                trainer_rng,
            ))
        }
        Algo::SubTb => AnyTrainer::SubTb(SubTbTrainer::new(
            Arc::clone(&world.env),
            &cfg.hidden_sizes(),
            cfg.train.batch,
            cfg.train.lr,
            cfg.subtb_lambda,
            trainer_rng,
        )),
    };

    let run_id = cfg.run_id();
    let csv_path = out_dir.join("metrics.csv");
    if csv_path.exists() {
        std::fs::remove_file(&csv_path)?;
    }
    let mut writer = MetricsWriter::open(&csv_path)?;
    let started = Instant::now();
    let mut rows = Vec::new();
    let record = |writer: &mut MetricsWriter,
                      rows: &mut Vec<MetricsRecord>,
                      trainer: &AnyTrainer,
                      metric: &str,
                      value: f64|
     -> Result<(), RunError> {
        let (iteration, trajectories, reward_calls) = trainer.counters();
        let row = MetricsRecord {
            run_id: run_id.clone(),
            algo: cfg.algo.as_str().into(),
            env: cfg.env.name().into(),
            seed: cfg.seed,
            iteration,
            trajectories,
            reward_calls,
            metric: metric.into(),
            value,
            wall_s: started.elapsed().as_secs_f64(),
        };
        writer.write(&row)?;
        rows.push(row);
        Ok(())
    };

    for it in 1..=cfg.train.iters {
        let loss = trainer.train_iteration()?;
        record(&mut writer, &mut rows, &trainer, "loss", loss)?;
        if it % cfg.eval.period == 0 || it == cfg.train.iters {
            let value = evaluate(cfg, &world, &trainer, seeded_eval(cfg.seed, it))?;
            record(
                &mut writer,
                &mut rows,
                &trainer,
                cfg.eval.metric.as_str(),
                value,
            )?;
        }
        if cfg.train.ckpt_period > 0 && it % cfg.train.ckpt_period == 0 && it != cfg.train.iters {
            trainer
                .checkpoint(cfg)
                .save(&out_dir.join(format!("checkpoint_{it:06}.json")))?;
        }
    }
    writer.flush()?;
    let final_checkpoint = out_dir.join("checkpoint_final.json");
    trainer.checkpoint(cfg).save(&final_checkpoint)?;
    Ok(TrainOutcome {
        out_dir,
        final_checkpoint,
        rows,
    })
}

fn seeded_eval(seed: u64, iteration: u64) -> u64 {
    crate::numerics::derive_seed_indexed(seed, "eval", iteration)
}

pub struct EvalOutcome {
    pub rows: Vec<MetricsRecord>,
    pub csv_path: PathBuf,
}

/// Evaluate a checkpoint at several search budgets in one invocation,
/// appending one metric row and one throughput row per budget. `rounds = 0`
/// means plain policy evaluation without search.
pub fn cmd_eval(
    ckpt_path: &Path,
    rounds: &[u32],
    overrides: &[(String, String)],
    csv_override: Option<PathBuf>,
) -> Result<EvalOutcome, RunError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let base_cfg = RunConfig::from_map(ckpt.env_config.clone())?;
    let mut map = ckpt.env_config.clone();
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    let cfg = RunConfig::from_map(map)?;
    if cfg.env != base_cfg.env {
        return Err(RunError::Invalid(
            "override changes the environment; it must match the checkpoint".into(),
        ));
    }
    if cfg.algo != base_cfg.algo {
        return Err(RunError::Invalid(
            "override changes the algorithm; it must match the checkpoint".into(),
        ));
    }
    let world = build_world(&cfg, false)?;
    if ckpt.net.input_len() != world.env.encoding_len() {
        return Err(RunError::Invalid(
            "checkpoint network does not match the environment".into(),
        ));
    }

    let csv_path = csv_override.unwrap_or_else(|| {
        ckpt_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("metrics.csv")
    });
    let mut writer = MetricsWriter::open(&csv_path)?;
    let run_id = cfg.run_id();
    let mut rows = Vec::new();

    for &r in rounds {
        let eval_seed = crate::numerics::derive_seed_indexed(cfg.seed, "eval-cmd", r as u64);
        let search = MentsConfig::new(r.max(1), cfg.ments.eps)?
            .with_reward_access(cfg.ments.terminal_reward_access);
        let head;
        let policy = if r == 0 {
            EvalPolicy::Vanilla { net: &ckpt.net }
        } else if cfg.algo == Algo::SubTb {
            head = PolicyHead { net: &ckpt.net };
            EvalPolicy::Ments {
                q: &head,
                cfg: search,
            }
        } else {
            EvalPolicy::Ments {
                q: &ckpt.net,
                cfg: search,
            }
        };
        let started = Instant::now();
        let value = evaluate_policy(&cfg, &world, &policy, eval_seed)?;
        let elapsed = started.elapsed().as_secs_f64();
        // trajectory count behind this evaluation, for throughput reporting
        let trajectories = match cfg.eval.metric {
            MetricKind::L1 => cfg.eval.samples as u64,
            MetricKind::Spearman => {
                (world.test_set.as_ref().map_or(0, |t| t.len()) * cfg.eval.ptheta_samples) as u64
            }
        };
        for (metric, v, wall) in [
            (format!("{}_rounds{}", cfg.eval.metric.as_str(), r), value, elapsed),
            (format!("throughput_rounds{r}"), trajectories as f64, elapsed),
        ] {
            let row = MetricsRecord {
                run_id: run_id.clone(),
                algo: cfg.algo.as_str().into(),
                env: cfg.env.name().into(),
                seed: cfg.seed,
                iteration: ckpt.iteration,
                trajectories,
                reward_calls: 0,
                metric,
                value: v,
                wall_s: wall,
            };
            writer.write(&row)?;
            rows.push(row);
        }
    }
    writer.flush()?;
    Ok(EvalOutcome { rows, csv_path })
}

pub struct OracleOutcome {
    pub log_z: f64,
    pub z: f64,
    pub states: usize,
    pub edges: usize,
    pub terminals: usize,
    pub max_tb_residual: f64,
    pub terminals_path: Option<PathBuf>,
}

/// Build the exact oracle, run the full invariant suite (flow matching,
/// soft-Bellman fixed point, pi* duality, trajectory-balance residuals on
/// 1000 sampled trajectories), and report Z. Errors on any violation.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<OracleOutcome, RunError> {
    let world = build_world(cfg, true)?;
    let oracle = world
        .oracle
        .as_ref()
        .expect("build_world(need_oracle) sets the oracle");
    oracle.check_invariants(1e-10, 1e-12)?;

    let mut rng = seeded_rng(cfg.seed, "oracle-tb");
    let mut max_residual = 0.0f64;
    for _ in 0..1000 {
        let traj = oracle.sample_pi_star(&mut rng);
        let r = crate::metrics::tb_residual(&traj, &traj.log_pf, oracle).abs();
        max_residual = max_residual.max(r);
    }
    if max_residual > 1e-9 {
        return Err(RunError::Invalid(format!(
            "trajectory balance residual {max_residual} exceeds 1e-9"
        )));
    }

    let terminals_path = if let Some(out_dir) = &cfg.out_dir {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("terminals.csv");
        let mut text = String::from("state,reward,probability\n");
        for i in oracle.terminal_indices() {
            let s = oracle.state(i);
            let reward = oracle.v_star(i).exp();
            let prob = (oracle.v_star(i) - oracle.log_z()).exp();
            text.push_str(&format!("{},{},{}\n", world.env.describe(s), reward, prob));
        }
        std::fs::write(&path, text)?;
        Some(path)
    } else {
        None
    };

    Ok(OracleOutcome {
        log_z: oracle.log_z(),
        z: oracle.z(),
        states: oracle.len(),
        edges: oracle.num_edges(),
        terminals: oracle.terminal_indices().count(),
        max_tb_residual: max_residual,
        terminals_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("gfn-run-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn smoke_cfg(out: &Path) -> RunConfig {
        RunConfig::from_text(&format!(
            "env=hypergrid\ngrid.dim=2\ngrid.side=4\nnet.hidden=32\nnet.layers=2\n\
             train.iters=20\ntrain.batch=8\neval.period=10\neval.samples=2000\n\
             seed=5\nout={}\n",
            out.display()
        ))
        .unwrap()
    }

    #[test]
    fn chunk_sizes_partition_totals() {
        assert_eq!(chunk_sizes(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(chunk_sizes(3, 3), vec![1, 1, 1]);
        let s = chunk_sizes(100_001, 32);
        assert_eq!(s.iter().sum::<usize>(), 100_001);
    }

    #[test]
    fn run_chunked_is_order_stable() {
        let out: Result<Vec<usize>, ()> = run_chunked(17, |i| Ok(i * i));
        assert_eq!(out.unwrap(), (0..17).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn train_writes_all_artifacts_and_is_deterministic() {
        let dir = tmp_dir("train");
        let cfg = smoke_cfg(&dir.join("a"));
        let outcome = cmd_train(&cfg).unwrap();
        assert!(outcome.out_dir.join("config.txt").exists());
        assert!(outcome.out_dir.join("manifest.json").exists());
        assert!(outcome.out_dir.join("metrics.csv").exists());
        assert!(outcome.final_checkpoint.exists());
        // 20 loss rows + 2 eval rows (iterations 10 and 20)
        assert_eq!(outcome.rows.len(), 22);

        // rerun into another directory: identical metrics modulo wall_s
        let cfg_b = smoke_cfg(&dir.join("b"));
        let outcome_b = cmd_train(&cfg_b).unwrap();
        let strip = |p: &Path| -> Vec<String> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect()
        };
        // the out= key differs between the two configs, so compare the data
        // columns except run_id and wall_s
        let a_rows = strip(&outcome.out_dir.join("metrics.csv"));
        let b_rows = strip(&outcome_b.out_dir.join("metrics.csv"));
        let drop_run_id = |rows: Vec<String>| -> Vec<String> {
            rows.into_iter()
                .map(|l| l.split_once(',').unwrap().1.to_string())
                .collect()
        };
        assert_eq!(drop_run_id(a_rows), drop_run_id(b_rows));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn eval_command_appends_metric_and_throughput_rows() {
        let dir = tmp_dir("eval");
        let cfg = smoke_cfg(&dir.join("run"));
        let outcome = cmd_train(&cfg).unwrap();
        let eval = cmd_eval(
            &outcome.final_checkpoint,
            &[0, 2],
            &[("eval.samples".into(), "500".into())],
            None,
        )
        .unwrap();
        assert_eq!(eval.rows.len(), 4);
        assert_eq!(eval.rows[0].metric, "l1_rounds0");
        assert_eq!(eval.rows[1].metric, "throughput_rounds0");
        assert_eq!(eval.rows[2].metric, "l1_rounds2");
        assert!(eval.csv_path.exists());
        // the run's metrics.csv got the four extra rows
        let text = std::fs::read_to_string(&eval.csv_path).unwrap();
        assert_eq!(text.lines().count(), 1 + 22 + 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn eval_rejects_env_mismatch() {
        let dir = tmp_dir("evalmismatch");
        let cfg = smoke_cfg(&dir.join("run"));
        let outcome = cmd_train(&cfg).unwrap();
        let err = cmd_eval(
            &outcome.final_checkpoint,
            &[0],
            &[("grid.side".into(), "8".into())],
            None,
        );
        assert!(err.is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn oracle_command_validates_and_writes_terminals() {
        let dir = tmp_dir("oracle");
        let cfg = RunConfig::from_text(&format!(
            "env=hypergrid\ngrid.dim=2\ngrid.side=8\nout={}\n",
            dir.display()
        ))
        .unwrap();
        let outcome = cmd_oracle(&cfg).unwrap();
        assert_eq!(outcome.terminals, 64);
        assert!(outcome.max_tb_residual < 1e-9);
        let path = outcome.terminals_path.unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 65);
        // Z equals the enumeration sum
        let env = Hypergrid::new(crate::env::HypergridConfig::new(2, 8)).unwrap();
        let z: f64 = env
            .enumerate_terminals(100)
            .unwrap()
            .iter()
            .map(|(_, r)| r)
            .sum();
        assert!((outcome.z - z).abs() < 1e-10);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn oracle_command_rejects_oversized_envs() {
        let cfg =
            RunConfig::from_text("env=hypergrid\ngrid.dim=4\ngrid.side=32\n").unwrap();
        assert!(matches!(
            cmd_oracle(&cfg),
            Err(RunError::Oracle(OracleError::Env(
                EnvError::NotEnumerable { .. }
            )))
        ));
    }
}
