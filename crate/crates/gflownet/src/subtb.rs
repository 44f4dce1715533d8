//! Subtrajectory balance baseline.
//!
//! One shared network produces masked policy logits plus a scalar log-flow
//! head (the final output). For a complete trajectory every subtrajectory
//! i -> j contributes the squared residual
//! `A(i,j) = log F(s_i) + sum log P_F - log F~(s_j) - sum log P_B`,
//! where `F~` is the reward at the terminal state and the flow head
//! elsewhere; residuals are weighted by lambda^(j-i) and normalized by the
//! total weight.

use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, Trajectory};
use crate::nn::{AdamState, Gradients, Matrix, Mlp, NnError, QFunction};
use crate::numerics::{logsumexp_indexed, softmax_indexed, NEG_Q};
use crate::oracle::OracleTables;
use crate::softdqn::{sample_softmax_trajectories, IterationStats, SoftDqnError};

#[derive(Debug, Error)]
pub enum SubTbError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid subtb config: {0}")]
    Config(String),
}

impl From<SoftDqnError> for SubTbError {
    fn from(e: SoftDqnError) -> Self {
        match e {
            SoftDqnError::Env(inner) => SubTbError::Env(inner),
            SoftDqnError::Nn(inner) => SubTbError::Nn(inner),
            other => SubTbError::Config(other.to_string()),
        }
    }
}

/// Policy logits over the full action space plus the scalar log state flow.
pub trait FlowPolicySource {
    fn logits_flow(&self, env: &dyn Env, state: &EnvState) -> Result<(Vec<f64>, f64), NnError>;
}

/// The shared-trunk network: output width = action space + 1, the last
/// column being log F(s).
impl FlowPolicySource for Mlp {
    fn logits_flow(&self, env: &dyn Env, state: &EnvState) -> Result<(Vec<f64>, f64), NnError> {
        if self.output_len() != env.action_space() + 1 {
            return Err(NnError::Shape(
                "flow-policy net needs action_space + 1 outputs".into(),
            ));
        }
        let mut out = self.forward_one(&env.encode(state));
        let flow = out.pop().expect("non-empty output");
        Ok((out, flow))
    }
}

/// Exact flows and edge-flow logits taken from an oracle, for tests.
pub struct TabularFlowPolicy {
    logits: HashMap<Box<[u8]>, Vec<f64>>,
    flow: HashMap<Box<[u8]>, f64>,
}

impl TabularFlowPolicy {
    pub fn from_oracle(oracle: &OracleTables) -> Self {
        let mut logits = HashMap::new();
        let mut flow = HashMap::new();
        for i in 0..oracle.len() {
            let key = oracle.state(i).key().to_vec().into_boxed_slice();
            flow.insert(key.clone(), oracle.v_star(i));
            if !oracle.state(i).is_terminal() {
                logits.insert(key, oracle.q_star(i));
            }
        }
        TabularFlowPolicy { logits, flow }
    }
}

impl FlowPolicySource for TabularFlowPolicy {
    fn logits_flow(&self, _env: &dyn Env, state: &EnvState) -> Result<(Vec<f64>, f64), NnError> {
        let logits = self
            .logits
            .get(state.key())
            .cloned()
            .ok_or(NnError::UnknownState)?;
        let flow = *self.flow.get(state.key()).ok_or(NnError::UnknownState)?;
        Ok((logits, flow))
    }
}

/// The weighted mean squared subtrajectory residual of one trajectory.
pub fn subtb_loss(
    env: &dyn Env,
    traj: &Trajectory,
    src: &dyn FlowPolicySource,
    lambda: f64,
) -> Result<f64, SubTbError> {
    let n = traj.len();
    let mut log_pf = Vec::with_capacity(n);
    let mut log_flow = Vec::with_capacity(n);
    for t in 0..n {
        let state = &traj.states[t];
        let (logits, flow) = src.logits_flow(env, state)?;
        let valid = env.valid_actions(state)?;
        let lse = logsumexp_indexed(&logits, &valid);
        log_pf.push(logits[traj.actions[t]] - lse);
        log_flow.push(flow);
    }
    // prefix sums of log P_F - log P_B
    let mut c = vec![0.0; n + 1];
    for t in 1..=n {
        c[t] = c[t - 1] + log_pf[t - 1] - traj.log_pb[t - 1];
    }
    let log_r = traj.reward.ln();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in i + 1..=n {
            let f_j = if j == n { log_r } else { log_flow[j] };
            let a = log_flow[i] - f_j + c[j] - c[i];
            let w = lambda.powi((j - i) as i32);
            num += w * a * a;
            den += w;
        }
    }
    Ok(num / den)
}

/// Mean loss over a batch of trajectories plus the gradient of that mean
/// with respect to the network parameters.
fn subtb_loss_backward(
    env: &dyn Env,
    net: &Mlp,
    trajs: &[Trajectory],
    lambda: f64,
) -> Result<(f64, Gradients), SubTbError> {
    let actions = env.action_space();
    // one forward pass over every non-terminal state in the batch
    let mut total_rows = 0;
    for t in trajs {
        total_rows += t.len();
    }
    let mut input = Matrix::zeros(total_rows, env.encoding_len());
    let mut row = 0;
    for traj in trajs {
        for t in 0..traj.len() {
            env.encode_into(&traj.states[t], input.row_mut(row));
            row += 1;
        }
    }
    let (out, trace) = net.forward_trace(&input);
    let mut grad_out = Matrix::zeros(out.rows, out.cols);
    let batch = trajs.len() as f64;
    let mut total_loss = 0.0;
    let mut base_row = 0;
    for traj in trajs {
        let n = traj.len();
        // per-state log P_F and policy, plus flows, from this batch's rows
        let mut log_pf = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let mut valid_sets = Vec::with_capacity(n);
        let mut log_flow = Vec::with_capacity(n);
        for t in 0..n {
            let r = out.row(base_row + t);
            let valid = env.valid_actions(&traj.states[t])?;
            let lse = logsumexp_indexed(r, &valid);
            log_pf.push(r[traj.actions[t]] - lse);
            probs.push(softmax_indexed(&r[..actions], &valid));
            valid_sets.push(valid);
            log_flow.push(r[actions]);
        }
        let mut c = vec![0.0; n + 1];
        for t in 1..=n {
            c[t] = c[t - 1] + log_pf[t - 1] - traj.log_pb[t - 1];
        }
        let log_r = traj.reward.ln();
        // total weight for this trajectory's normalization
        let mut den = 0.0;
        for g in 1..=n {
            den += lambda.powi(g as i32) * (n + 1 - g) as f64;
        }
        let mut loss = 0.0;
        let mut g_flow = vec![0.0; n];
        let mut g_c_diff = vec![0.0; n + 2];
        for i in 0..n {
            for j in i + 1..=n {
                let f_j = if j == n { log_r } else { log_flow[j] };
                let a = log_flow[i] - f_j + c[j] - c[i];
                let w = lambda.powi((j - i) as i32);
                loss += w * a * a;
                let d = 2.0 * w * a / (den * batch);
                g_flow[i] += d;
                if j < n {
                    g_flow[j] -= d;
                }
                // log P_F terms for i < t <= j
                g_c_diff[i + 1] += d;
                g_c_diff[j + 1] -= d;
            }
        }
        total_loss += loss / den;
        // cotangents per state row
        let mut g_c = 0.0;
        for t in 0..n {
            g_c += g_c_diff[t + 1];
            let g_row = grad_out.row_mut(base_row + t);
            // d log P_F / d logits = onehot(action) - softmax
            for &a in &valid_sets[t] {
                g_row[a] -= g_c * probs[t][a];
            }
            g_row[traj.actions[t]] += g_c;
            g_row[actions] = g_flow[t];
        }
        base_row += n;
    }
    let grads = net.backward(&input, &trace, &grad_out);
    Ok((total_loss / batch, grads))
}

pub struct SubTbTrainer {
    env: Arc<dyn Env>,
    pub net: Mlp,
    pub adam: AdamState,
    pub lambda: f64,
    batch: usize,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub trajectories: u64,
    pub reward_calls: u64,
}

impl SubTbTrainer {
    pub fn new(
        env: Arc<dyn Env>,
        hidden: &[usize],
        batch: usize,
        lr: f64,
        lambda: f64,
        mut rng: ChaCha8Rng,
    ) -> Self {
        let mut sizes = vec![env.encoding_len()];
        sizes.extend_from_slice(hidden);
        sizes.push(env.action_space() + 1);
        let net = Mlp::init(&sizes, crate::nn::Activation::LeakyRelu, &mut rng);
        let adam = AdamState::new(&net, lr);
        SubTbTrainer {
            env,
            net,
            adam,
            lambda,
            batch,
            rng,
            iteration: 0,
            trajectories: 0,
            reward_calls: 0,
        }
    }

    /// On-policy batch from the policy head, one Adam step on the mean loss.
    pub fn train_iteration(&mut self) -> Result<IterationStats, SubTbError> {
        let trajs = sample_softmax_trajectories(
            &*self.env,
            &self.net,
            self.batch,
            0.0,
            &mut self.rng,
        )?;
        let (loss, grads) = subtb_loss_backward(&*self.env, &self.net, &trajs, self.lambda)?;
        self.adam.step(&mut self.net, &grads);
        self.iteration += 1;
        self.trajectories += self.batch as u64;
        self.reward_calls += self.batch as u64;
        let transitions = trajs.iter().map(|t| t.len()).sum();
        Ok(IterationStats { loss, transitions })
    }
}

/// The policy head alone, viewed as a Q evaluator (for shared eval paths).
pub struct PolicyHead<'a> {
    pub net: &'a Mlp,
}

impl QFunction for PolicyHead<'_> {
    fn q_values(&self, env: &dyn Env, state: &EnvState) -> Result<Vec<f64>, NnError> {
        if self.net.output_len() != env.action_space() + 1 {
            return Err(NnError::Shape(
                "flow-policy net needs action_space + 1 outputs".into(),
            ));
        }
        let mut out = self.net.forward_one(&env.encode(state));
        out.pop();
        let valid = env
            .valid_actions(state)
            .map_err(|e| NnError::Shape(e.to_string()))?;
        let mut keep = vec![false; out.len()];
        for a in valid {
            keep[a] = true;
        }
        for (o, k) in out.iter_mut().zip(keep) {
            if !k {
                *o = NEG_Q;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Hypergrid, HypergridConfig};
    use crate::testutil::ChainEnv;
    use rand::SeedableRng;

    /// Fully naive recomputation: explicit policy/flow calls per state and a
    /// direct double loop over subtrajectories.
    fn naive_loss(
        env: &dyn Env,
        traj: &Trajectory,
        src: &dyn FlowPolicySource,
        lambda: f64,
    ) -> f64 {
        let n = traj.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in i + 1..=n {
                let (_, f_i) = src.logits_flow(env, &traj.states[i]).unwrap();
                let f_j = if traj.states[j].is_terminal() {
                    traj.reward.ln()
                } else {
                    src.logits_flow(env, &traj.states[j]).unwrap().1
                };
                let mut a = f_i - f_j;
                for t in i..j {
                    let (logits, _) = src.logits_flow(env, &traj.states[t]).unwrap();
                    let valid = env.valid_actions(&traj.states[t]).unwrap();
                    let lse = logsumexp_indexed(&logits, &valid);
                    a += logits[traj.actions[t]] - lse;
                    a -= traj.log_pb[t];
                }
                let w = lambda.powi((j - i) as i32);
                num += w * a * a;
                den += w;
            }
        }
        num / den
    }

    #[test]
    fn single_edge_trajectory_with_matched_flow_is_balanced() {
        let env = ChainEnv::new(1, 2.0);
        let oracle = OracleTables::exact_flows(&env, 10).unwrap();
        let src = TabularFlowPolicy::from_oracle(&oracle);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = oracle.sample_pi_star(&mut rng);
        assert_eq!(traj.len(), 1);
        let loss = subtb_loss(&env, &traj, &src, 0.9).unwrap();
        assert!(loss < 1e-18, "loss {loss}");
    }

    #[test]
    fn oracle_loaded_net_has_zero_loss_on_any_trajectory() {
        let env = Hypergrid::new(HypergridConfig::new(2, 4)).unwrap();
        let oracle = OracleTables::exact_flows(&env, 10_000).unwrap();
        let src = TabularFlowPolicy::from_oracle(&oracle);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let traj = oracle.sample_pi_star(&mut rng);
            let loss = subtb_loss(&env, &traj, &src, 0.9).unwrap();
            assert!(loss < 1e-9, "loss {loss}");
        }
    }

    #[test]
    fn loss_matches_naive_recomputation_and_weight_sum() {
        let env = Hypergrid::new(HypergridConfig::new(2, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init_rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::init(
            &[env.encoding_len(), 8, env.action_space() + 1],
            crate::nn::Activation::LeakyRelu,
            &mut init_rng,
        );
        let trajs = sample_softmax_trajectories(&env, &net, 20, 0.0, &mut rng).unwrap();
        for traj in &trajs {
            let fast = subtb_loss(&env, traj, &net, 0.9).unwrap();
            let slow = naive_loss(&env, traj, &net, 0.9);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
        // weight denominator for a length-3 trajectory at lambda = 0.9:
        // 3*0.9 + 2*0.81 + 1*0.729 = 5.049
        let lambda: f64 = 0.9;
        let n = 3;
        let mut den = 0.0;
        for g in 1..=n {
            den += lambda.powi(g as i32) * (n + 1 - g) as f64;
        }
        assert!((den - 5.049).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_weights_all_subtrajectories_equally() {
        let env = Hypergrid::new(HypergridConfig::new(2, 4)).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::init(
            &[env.encoding_len(), 8, env.action_space() + 1],
            crate::nn::Activation::LeakyRelu,
            &mut init_rng,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let trajs = sample_softmax_trajectories(&env, &net, 5, 0.0, &mut rng).unwrap();
        for traj in &trajs {
            let n = traj.len();
            let loss = subtb_loss(&env, traj, &net, 1.0).unwrap();
            // at lambda = 1 the loss is the plain average of squared residuals
            let naive = naive_loss(&env, traj, &net, 1.0);
            assert!((loss - naive).abs() < 1e-10);
            assert!(n >= 1);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let env = Hypergrid::new(HypergridConfig::new(2, 3)).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Mlp::init(
            &[env.encoding_len(), 6, env.action_space() + 1],
            crate::nn::Activation::LeakyRelu,
            &mut init_rng,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trajs = sample_softmax_trajectories(&env, &net, 3, 0.0, &mut rng).unwrap();
        let (_, grads) = subtb_loss_backward(&env, &net, &trajs, 0.9).unwrap();
        let eval = |net: &Mlp| {
            trajs
                .iter()
                .map(|t| subtb_loss(&env, t, net, 0.9).unwrap())
                .sum::<f64>()
                / trajs.len() as f64
        };
        let h = 1e-5;
        for l in 0..net.weights.len() {
            for idx in 0..net.weights[l].data.len() {
                let orig = net.weights[l].data[idx];
                net.weights[l].data[idx] = orig + h;
                let up = eval(&net);
                net.weights[l].data[idx] = orig - h;
                let down = eval(&net);
                net.weights[l].data[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads.weights[l].data[idx];
                let denom = g.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (g - fd).abs() / denom < 1e-4,
                    "layer {l} idx {idx}: {g} vs {fd}"
                );
            }
            for idx in 0..net.biases[l].len() {
                let orig = net.biases[l][idx];
                net.biases[l][idx] = orig + h;
                let up = eval(&net);
                net.biases[l][idx] = orig - h;
                let down = eval(&net);
                net.biases[l][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads.biases[l][idx];
                let denom = g.abs().max(fd.abs()).max(1e-6);
                assert!((g - fd).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let env: Arc<dyn Env> = Arc::new(Hypergrid::new(HypergridConfig::new(2, 4)).unwrap());
        let mut trainer =
            SubTbTrainer::new(env, &[16], 8, 0.0, 0.9, ChaCha8Rng::seed_from_u64(9));
        let before = trainer.net.clone();
        let stats = trainer.train_iteration().unwrap();
        assert!(stats.loss.is_finite());
        assert_eq!(trainer.net, before);
    }

    #[test]
    fn reward_call_accounting() {
        let env: Arc<dyn Env> = Arc::new(Hypergrid::new(HypergridConfig::new(2, 4)).unwrap());
        let mut trainer =
            SubTbTrainer::new(env, &[16], 8, 1e-3, 0.9, ChaCha8Rng::seed_from_u64(10));
        for _ in 0..4 {
            trainer.train_iteration().unwrap();
        }
        assert_eq!(trainer.reward_calls, 32);
    }

    #[test]
    fn loss_decreases_over_training() {
        // median over 3 seeds on the small grid
        let mut finals = Vec::new();
        let mut initials = Vec::new();
        for seed in 0..3 {
            let env: Arc<dyn Env> = Arc::new(Hypergrid::new(HypergridConfig::new(2, 4)).unwrap());
            let mut trainer = SubTbTrainer::new(
                env,
                &[32, 32],
                16,
                1e-3,
                0.9,
                ChaCha8Rng::seed_from_u64(100 + seed),
            );
            let mut first = 0.0;
            let mut last = 0.0;
            for it in 0..200 {
                let stats = trainer.train_iteration().unwrap();
                if it == 0 {
                    first = stats.loss;
                }
                last = stats.loss;
            }
            initials.push(first);
            finals.push(last);
        }
        initials.sort_by(|a, b| a.partial_cmp(b).unwrap());
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            finals[1] < initials[1],
            "median loss did not decrease: {:?} -> {:?}",
            initials,
            finals
        );
    }

    #[test]
    fn policy_head_masks_like_a_q_function() {
        let env = Hypergrid::new(HypergridConfig::new(2, 4)).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::init(
            &[env.encoding_len(), 8, env.action_space() + 1],
            crate::nn::Activation::LeakyRelu,
            &mut init_rng,
        );
        let head = PolicyHead { net: &net };
        let corner = env.state(&[3, 3], false);
        let q = head.q_values(&env, &corner).unwrap();
        assert_eq!(q.len(), env.action_space());
        assert_eq!(q[0], NEG_Q);
        assert_eq!(q[1], NEG_Q);
        assert!(q[2] > NEG_Q);
    }
}
