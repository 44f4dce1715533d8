//! Evaluation metrics and the metrics CSV schema.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, Trajectory};
use crate::nn::{NnError, QFunction};
use crate::numerics::{logsumexp, softmax_indexed};
use crate::oracle::OracleTables;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("input lengths differ")]
    LengthMismatch,
    #[error("need at least two points")]
    TooShort,
    #[error("rank variance is zero; correlation undefined")]
    ZeroVariance,
    #[error("empty sample")]
    EmptySample,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One evaluation point. `wall_s` is the only column allowed to differ
/// between reruns of the same seed.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub run_id: String,
    pub algo: String,
    pub env: String,
    pub seed: u64,
    pub iteration: u64,
    pub trajectories: u64,
    pub reward_calls: u64,
    pub metric: String,
    pub value: f64,
    pub wall_s: f64,
}

pub const CSV_HEADER: &str =
    "run_id,algo,env,seed,iteration,trajectories,reward_calls,metric,value,wall_s";

/// Appending CSV writer for [`MetricsRecord`] rows.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Create (with header) or append to a metrics file.
    pub fn open(path: &Path) -> Result<Self, MetricsError> {
        let fresh = !path.exists();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{CSV_HEADER}")?;
        }
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<(), MetricsError> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.algo,
            r.env,
            r.seed,
            r.iteration,
            r.trajectories,
            r.reward_calls,
            r.metric,
            r.value,
            r.wall_s
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.out.flush()?;
        Ok(())
    }
}

/// L1 distance between an empirical terminal distribution and the exact
/// reward distribution R(x)/Z. Counts on keys outside the oracle's support
/// contribute their full empirical mass, so disjoint supports give 2.
/// Summation runs in a fixed order so reruns are bit-identical.
pub fn l1_distance(
    counts: &HashMap<Box<[u8]>, u64>,
    oracle: &OracleTables,
) -> Result<f64, MetricsError> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(MetricsError::EmptySample);
    }
    let total = total as f64;
    let mut support = std::collections::HashSet::new();
    let mut l1 = 0.0;
    for i in oracle.terminal_indices() {
        let key = oracle.state(i).key();
        support.insert(key.to_vec().into_boxed_slice());
        let p = (oracle.v_star(i) - oracle.log_z()).exp();
        let emp = counts.get(key).copied().unwrap_or(0) as f64 / total;
        l1 += (emp - p).abs();
    }
    let mut strays: Vec<(&Box<[u8]>, &u64)> = counts
        .iter()
        .filter(|(k, _)| !support.contains(*k))
        .collect();
    strays.sort_by(|a, b| a.0.cmp(b.0));
    for (_, c) in strays {
        l1 += *c as f64 / total;
    }
    Ok(l1)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 averaged across the tie group
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks, ties averaged.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch);
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(num / (dx * dy).sqrt())
}

/// Trajectory balance residual: sum log P_F - log R(x) + log Z - sum log P_B.
/// Zero iff the forward log-probabilities balance the trajectory.
pub fn tb_residual(trajectory: &Trajectory, log_pf: &[f64], oracle: &OracleTables) -> f64 {
    debug_assert_eq!(log_pf.len(), trajectory.len());
    let sum_pf: f64 = log_pf.iter().sum();
    sum_pf - trajectory.reward.ln() + oracle.log_z() - trajectory.sum_log_pb()
}

/// A forward policy that can score an arbitrary root-to-terminal path.
pub trait PolicyEvaluator {
    /// log P_F for each transition along `states` (s0 first, terminal last).
    fn log_pf_path(&self, env: &dyn Env, states: &[EnvState]) -> Result<Vec<f64>, MetricsError>;
}

/// The plain softmax policy of a Q evaluator.
pub struct SoftmaxPolicy<'a> {
    pub q: &'a dyn QFunction,
}

impl PolicyEvaluator for SoftmaxPolicy<'_> {
    fn log_pf_path(&self, env: &dyn Env, states: &[EnvState]) -> Result<Vec<f64>, MetricsError> {
        let mut out = Vec::with_capacity(states.len().saturating_sub(1));
        for t in 0..states.len() - 1 {
            let q = self.q.q_values(env, &states[t])?;
            let valid = env.valid_actions(&states[t])?;
            let probs = softmax_indexed(&q, &valid);
            let action = action_between(env, &states[t], &states[t + 1])?;
            out.push(probs[action].ln());
        }
        Ok(out)
    }
}

/// Forward action index leading from `parent` to `child`.
pub fn action_between(
    env: &dyn Env,
    parent: &EnvState,
    child: &EnvState,
) -> Result<usize, MetricsError> {
    for (action, p) in env.parents(child)?.iter() {
        if p == parent {
            return Ok(action);
        }
    }
    Err(EnvError::NotAnEdge {
        parent: format!("{parent:?}"),
        child: format!("{child:?}"),
    }
    .into())
}

/// Monte Carlo estimate of log P_theta(x): sample `num_samples` backward
/// trajectories from the uniform P_B and average the importance ratios
/// P_F(tau)/P_B(tau|x) in log space.
pub fn estimate_log_ptheta(
    env: &dyn Env,
    x: &EnvState,
    policy: &dyn PolicyEvaluator,
    num_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64, MetricsError> {
    assert!(num_samples >= 1);
    if !x.is_terminal() {
        return Err(EnvError::RewardOfNonTerminal.into());
    }
    let s0 = env.initial_state();
    let mut log_ratios = Vec::with_capacity(num_samples);
    let mut path = Vec::new();
    for _ in 0..num_samples {
        path.clear();
        path.push(x.clone());
        let mut log_pb = 0.0;
        while path.last().unwrap() != &s0 {
            let parents = env.parents(path.last().unwrap())?;
            let pick = rng.gen_range(0..parents.len());
            log_pb -= (parents.len() as f64).ln();
            let (_, parent) = parents.iter().nth(pick).expect("in range");
            path.push(parent.clone());
        }
        path.reverse();
        let log_pf: f64 = policy.log_pf_path(env, &path)?.iter().sum();
        log_ratios.push(log_pf - log_pb);
    }
    Ok(logsumexp(&log_ratios) - (num_samples as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Hypergrid, HypergridConfig};
    use crate::testutil::ChainEnv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_oracle(d: usize, h: usize) -> (Hypergrid, OracleTables) {
        let env = Hypergrid::new(HypergridConfig::new(d, h)).unwrap();
        let oracle = OracleTables::exact_flows(&env, 100_000).unwrap();
        (env, oracle)
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let x = [0.5, 1.0, 2.0, 3.5, 7.0];
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_tie_handling_matches_naive_ranks() {
        // naive O(n^2) average rank: 1 + #smaller + (#equal - 1)/2
        fn naive_ranks(v: &[f64]) -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let smaller = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    1.0 + smaller + (equal - 1.0) / 2.0
                })
                .collect()
        }
        let x = [1.0, 2.0, 2.0, 3.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(average_ranks(&x), naive_ranks(&x));
        assert_eq!(average_ranks(&y), naive_ranks(&y));

        // full correlation against Pearson on naive ranks
        let rx = naive_ranks(&x);
        let ry = naive_ranks(&y);
        let n = 4.0;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let dx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let dy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        let expected = num / (dx * dy).sqrt();
        assert!((spearman(&x, &y).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn spearman_error_cases() {
        assert!(matches!(
            spearman(&[1.0], &[1.0]),
            Err(MetricsError::TooShort)
        ));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(MetricsError::LengthMismatch)
        ));
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MetricsError::ZeroVariance)
        ));
    }

    #[test]
    fn l1_zero_when_exact_and_two_when_disjoint() {
        let (_, oracle) = grid_oracle(2, 4);
        let total = 1_000_000u64;
        let mut exact = HashMap::new();
        for (key, p) in oracle.terminal_distribution() {
            exact.insert(key, (p * total as f64).round() as u64);
        }
        // rounding error only
        assert!(l1_distance(&exact, &oracle).unwrap() < 1e-4);

        let mut disjoint = HashMap::new();
        disjoint.insert(vec![250u8, 250].into_boxed_slice(), 10u64);
        assert!((l1_distance(&disjoint, &oracle).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l1_of_pi_star_samples_is_small() {
        let (_, oracle) = grid_oracle(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts: HashMap<Box<[u8]>, u64> = HashMap::new();
        for _ in 0..200_000 {
            let t = oracle.sample_pi_star(&mut rng);
            *counts
                .entry(t.terminal().key().to_vec().into_boxed_slice())
                .or_default() += 1;
        }
        let l1 = l1_distance(&counts, &oracle).unwrap();
        assert!(l1 < 0.03, "l1 = {l1}");
    }

    #[test]
    fn tb_residual_zero_for_pi_star_and_linear_in_perturbation() {
        let (_, oracle) = grid_oracle(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = oracle.sample_pi_star(&mut rng);
            let r = tb_residual(&t, &t.log_pf, &oracle);
            assert!(r.abs() < 1e-9, "residual {r}");
            let mut bumped = t.log_pf.clone();
            bumped[0] += 0.125;
            let r2 = tb_residual(&t, &bumped, &oracle);
            assert!((r2 - r - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn tb_residual_zero_on_single_path_env() {
        let env = ChainEnv::new(4, 3.0);
        let oracle = OracleTables::exact_flows(&env, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = oracle.sample_pi_star(&mut rng);
        assert!(tb_residual(&t, &t.log_pf, &oracle).abs() < 1e-12);
    }

    #[test]
    fn log_ptheta_exact_on_single_path_env() {
        let env = ChainEnv::new(4, 3.0);
        let oracle = OracleTables::exact_flows(&env, 100).unwrap();
        let tab = oracle.to_tabular().unwrap();
        let policy = SoftmaxPolicy { q: &tab };
        let x = env.state_from_key(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 3, 16] {
            let est = estimate_log_ptheta(&env, &x, &policy, n, &mut rng).unwrap();
            assert!(est.abs() < 1e-12, "single path must have log P = 0");
        }
    }

    #[test]
    fn log_ptheta_with_pi_star_recovers_reward_distribution() {
        // pi* makes the importance ratio constant, so any N is exact
        let (env, oracle) = grid_oracle(2, 4);
        let tab = oracle.to_tabular().unwrap();
        let policy = SoftmaxPolicy { q: &tab };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in oracle.terminal_indices().take(8) {
            let x = oracle.state(i).clone();
            let exact = oracle.v_star(i) - oracle.log_z();
            let est = estimate_log_ptheta(&env, &x, &policy, 4, &mut rng).unwrap();
            assert!((est - exact).abs() < 1e-9, "est {est} vs exact {exact}");
        }
    }

    #[test]
    fn log_ptheta_unbiased_for_perturbed_policy() {
        // perturb Q*, compute the exact P_theta by forward DP, then check the
        // estimator against it within 3 standard errors (linear space)
        let (env, oracle) = grid_oracle(2, 4);
        let mut tab = oracle.to_tabular().unwrap();
        let mut noise = ChaCha8Rng::seed_from_u64(17);
        for i in 0..oracle.len() {
            let s = oracle.state(i).clone();
            if s.is_terminal() {
                continue;
            }
            if let Some(q) = tab.get_mut(&s) {
                for e in oracle.edges_of(i) {
                    q[e.action] += noise.gen_range(-0.4..0.4);
                }
            }
        }
        // exact forward probability mass per state
        let mut mass = vec![0.0; oracle.len()];
        mass[0] = 1.0;
        for &i in oracle.topo_order() {
            let s = oracle.state(i);
            if s.is_terminal() || mass[i] == 0.0 {
                continue;
            }
            let q = tab.q_values(&env, s).unwrap();
            let valid: Vec<usize> = oracle.edges_of(i).iter().map(|e| e.action).collect();
            let probs = softmax_indexed(&q, &valid);
            for e in oracle.edges_of(i) {
                mass[e.child] += mass[i] * probs[e.action];
            }
        }
        let policy = SoftmaxPolicy { q: &tab };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 64;
        for i in oracle.terminal_indices().take(6) {
            let x = oracle.state(i).clone();
            // collect ratios to get both the mean and its standard error
            let mut ratios = Vec::with_capacity(n);
            for _ in 0..n {
                let est = estimate_log_ptheta(&env, &x, &policy, 1, &mut rng).unwrap();
                ratios.push(est.exp());
            }
            let mean: f64 = ratios.iter().sum::<f64>() / n as f64;
            let var: f64 =
                ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - mass[i]).abs() <= 3.0 * se + 1e-12,
                "terminal {i}: mean {mean}, exact {}, se {se}",
                mass[i]
            );
        }
    }

    #[test]
    fn csv_writer_appends_with_single_header() {
        let dir = std::env::temp_dir().join(format!("gfn-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.csv");
        std::fs::remove_file(&path).ok();
        let rec = MetricsRecord {
            run_id: "abc".into(),
            algo: "softdqn".into(),
            env: "hypergrid".into(),
            seed: 1,
            iteration: 5,
            trajectories: 80,
            reward_calls: 80,
            metric: "l1".into(),
            value: 0.25,
            wall_s: 0.125,
        };
        {
            let mut w = MetricsWriter::open(&path).unwrap();
            w.write(&rec).unwrap();
            w.flush().unwrap();
        }
        {
            let mut w = MetricsWriter::open(&path).unwrap();
            w.write(&rec).unwrap();
            w.flush().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "abc,softdqn,hypergrid,1,5,80,80,l1,0.25,0.125");
        assert_eq!(lines[1], lines[2]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
