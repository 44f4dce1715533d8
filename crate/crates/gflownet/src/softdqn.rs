//! Entropy-regularized Q-learning with a hard-updated target network.
//!
//! With unit temperature and no discounting the converged softmax policy is
//! the GFlowNet forward policy. Each non-terminal transition regresses
//! `Q(s,s')` on `log P_B(s|s') + logsumexp(Q_target(s',.))`; transitions into
//! terminal states use `log P_B + log R` instead. Trajectories come from the
//! current policy (optionally mixed with a uniform exploration component),
//! from the prioritized replay buffer, or from MENTS driven by the target
//! network when search-improved targets are enabled.

use std::sync::Arc;


use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, Trajectory};
use crate::ments::{self, MentsConfig, MentsError};
use crate::nn::{
    hard_update, q_loss_backward, AdamState, Loss, Matrix, Mlp, NnError, QFunction, QTrainItem,
};
use crate::numerics::{logsumexp_indexed, sample_categorical, softmax_indexed};
use crate::replay::{ReplayBuffer, ReplayError, Transition};

#[derive(Debug, Error)]
pub enum SoftDqnError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Ments(#[from] MentsError),
    #[error("state has no valid action")]
    NoValidAction,
}

/// Masked softmax policy over Q values; invalid actions get exactly 0.
pub fn policy_from_q(q: &[f64], valid: &[usize]) -> Result<Vec<f64>, SoftDqnError> {
    if valid.is_empty() {
        return Err(SoftDqnError::NoValidAction);
    }
    Ok(softmax_indexed(q, valid))
}

/// The regression target of one transition: `log P_B + logsumexp(Q_target)`
/// for non-terminal children, `log P_B + log R` for terminal ones. A terminal
/// record with zero reward has no finite target and is rejected.
pub fn td_target(
    env: &dyn Env,
    record: &Transition,
    target: &dyn QFunction,
) -> Result<f64, SoftDqnError> {
    if record.terminal {
        if !record.log_reward.is_finite() {
            return Err(SoftDqnError::Env(EnvError::NonPositiveReward(
                record.log_reward.exp(),
            )));
        }
        Ok(record.log_pb + record.log_reward)
    } else {
        let child = env.state_from_key(&record.child_key);
        let q = target.q_values(env, &child)?;
        let valid = env.valid_actions(&child)?;
        Ok(record.log_pb + logsumexp_indexed(&q, &valid))
    }
}

/// Split a complete trajectory into stored transitions.
pub fn transitions_of(traj: &Trajectory) -> Result<Vec<Transition>, EnvError> {
    let mut out = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let parent = &traj.states[t];
        let child = &traj.states[t + 1];
        let record = if child.is_terminal() {
            Transition::terminal(
                parent.key(),
                traj.actions[t],
                child.key(),
                traj.log_pb[t],
                traj.reward,
            )?
        } else {
            Transition::step(parent.key(), traj.actions[t], child.key(), traj.log_pb[t])
        };
        out.push(record);
    }
    Ok(out)
}

/// Sample `count` trajectories from the softmax policy of `net`, stepping all
/// of them in lockstep so each step is one batched forward pass. The recorded
/// log P_F always refers to the model policy, even when an exploration mix
/// drives the actual action choice. Outputs beyond the action space (the
/// flow head of a subtrajectory-balance net) are ignored.
pub fn sample_softmax_trajectories(
    env: &dyn Env,
    net: &Mlp,
    count: usize,
    explore_eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>, SoftDqnError> {
    if net.input_len() != env.encoding_len() || net.output_len() < env.action_space() {
        return Err(SoftDqnError::Nn(NnError::Shape(
            "network does not match environment".into(),
        )));
    }
    let s0 = env.initial_state();
    let mut cur: Vec<EnvState> = vec![s0.clone(); count];
    let mut states: Vec<Vec<EnvState>> = (0..count).map(|_| vec![s0.clone()]).collect();
    let mut actions: Vec<Vec<usize>> = vec![Vec::new(); count];
    let mut log_pf: Vec<Vec<f64>> = vec![Vec::new(); count];
    let mut log_pb: Vec<Vec<f64>> = vec![Vec::new(); count];
    let mut active: Vec<usize> = (0..count).collect();
    let mut behavior = Vec::new();
    while !active.is_empty() {
        let mut input = Matrix::zeros(active.len(), env.encoding_len());
        for (r, &ti) in active.iter().enumerate() {
            env.encode_into(&cur[ti], input.row_mut(r));
        }
        let q = net.forward_batch(&input);
        let mut still = Vec::with_capacity(active.len());
        for (r, &ti) in active.iter().enumerate() {
            let valid = env.valid_actions(&cur[ti])?;
            let probs = policy_from_q(q.row(r), &valid)?;
            let action = if explore_eps > 0.0 {
                behavior.clear();
                behavior.extend_from_slice(&probs);
                let u = explore_eps / valid.len() as f64;
                for p in behavior.iter_mut() {
                    *p *= 1.0 - explore_eps;
                }
                for &a in &valid {
                    behavior[a] += u;
                }
                sample_categorical(&behavior, rng)
            } else {
                sample_categorical(&probs, rng)
            };
            let child = env.apply(&cur[ti], action)?;
            actions[ti].push(action);
            log_pf[ti].push(probs[action].ln());
            log_pb[ti].push(-(env.parent_count(&child)? as f64).ln());
            states[ti].push(child.clone());
            if !child.is_terminal() {
                still.push(ti);
            }
            cur[ti] = child;
        }
        active = still;
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let reward = env.reward(states[i].last().unwrap())?;
        out.push(Trajectory {
            states: std::mem::take(&mut states[i]),
            actions: std::mem::take(&mut actions[i]),
            log_pf: std::mem::take(&mut log_pf[i]),
            log_pb: std::mem::take(&mut log_pb[i]),
            reward,
        });
    }
    Ok(out)
}

/// Where each iteration's gradient batch comes from.
pub enum TrainMode {
    /// Fresh on-policy trajectories, one optimization step over all of their
    /// transitions.
    OnPolicy,
    /// Trajectories feed a replay buffer; the gradient batch is drawn back
    /// out of it (as many transitions as were just pushed), with importance
    /// weights and priority updates. `beta0` anneals linearly to 1 over
    /// `horizon` iterations.
    Replay {
        buffer: ReplayBuffer,
        beta0: f64,
        horizon: u64,
    },
    /// Behavior and targets both come from MENTS run with the target network.
    MentsTargets(MentsConfig),
}

#[derive(Clone, Debug)]
pub struct SoftDqnConfig {
    pub batch: usize,
    pub lr: f64,
    pub target_period: u64,
    pub loss: Loss,
    pub explore_eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct IterationStats {
    pub loss: f64,
    pub transitions: usize,
}

pub struct SoftDqnTrainer {
    env: Arc<dyn Env>,
    pub online: Mlp,
    pub target: Mlp,
    pub adam: AdamState,
    cfg: SoftDqnConfig,
    mode: TrainMode,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub trajectories: u64,
    pub reward_calls: u64,
}

impl SoftDqnTrainer {
    /// Fresh trainer with `[encoding, hidden.., actions]` layers.
    pub fn new(
        env: Arc<dyn Env>,
        hidden: &[usize],
        cfg: SoftDqnConfig,
        mode: TrainMode,
        mut rng: ChaCha8Rng,
    ) -> Self {
        assert!(cfg.target_period >= 1, "target period must be >= 1");
        let mut sizes = vec![env.encoding_len()];
        sizes.extend_from_slice(hidden);
        sizes.push(env.action_space());
        let online = Mlp::init(&sizes, crate::nn::Activation::LeakyRelu, &mut rng);
        let target = online.clone();
        let adam = AdamState::new(&online, cfg.lr);
        SoftDqnTrainer {
            env,
            online,
            target,
            adam,
            cfg,
            mode,
            rng,
            iteration: 0,
            trajectories: 0,
            reward_calls: 0,
        }
    }

    pub fn env(&self) -> &Arc<dyn Env> {
        &self.env
    }

    pub fn config(&self) -> &SoftDqnConfig {
        &self.cfg
    }

    pub fn replay_stale_skips(&self) -> u64 {
        match &self.mode {
            TrainMode::Replay { buffer, .. } => buffer.stale_skips(),
            _ => 0,
        }
    }

    /// Eq.(5)-style items for stored transitions, with one batched target-net
    /// pass over all non-terminal children.
    fn items_for(
        &self,
        records: &[Transition],
        weights: Option<&[f64]>,
    ) -> Result<Vec<QTrainItem>, SoftDqnError> {
        let env = &*self.env;
        let mut child_states = Vec::new();
        let mut row_of = vec![usize::MAX; records.len()];
        for (i, tr) in records.iter().enumerate() {
            if !tr.terminal {
                row_of[i] = child_states.len();
                child_states.push(env.state_from_key(&tr.child_key));
            } else if !tr.log_reward.is_finite() {
                return Err(SoftDqnError::Env(EnvError::NonPositiveReward(
                    tr.log_reward.exp(),
                )));
            }
        }
        let mut lse = vec![0.0; child_states.len()];
        if !child_states.is_empty() {
            let mut input = Matrix::zeros(child_states.len(), env.encoding_len());
            for (r, s) in child_states.iter().enumerate() {
                env.encode_into(s, input.row_mut(r));
            }
            let out = self.target.forward_batch(&input);
            for (r, s) in child_states.iter().enumerate() {
                let valid = env.valid_actions(s)?;
                lse[r] = logsumexp_indexed(out.row(r), &valid);
            }
        }
        let mut items = Vec::with_capacity(records.len());
        for (i, tr) in records.iter().enumerate() {
            let target = if tr.terminal {
                tr.log_pb + tr.log_reward
            } else {
                tr.log_pb + lse[row_of[i]]
            };
            let parent = env.state_from_key(&tr.parent_key);
            let mut mask = vec![false; env.action_space()];
            for a in env.valid_actions(&parent)? {
                mask[a] = true;
            }
            items.push(QTrainItem {
                encoded: env.encode(&parent),
                mask,
                action: tr.action,
                target,
                weight: weights.map_or(1.0, |w| w[i]),
            });
        }
        Ok(items)
    }

    fn items_from_ments(
        &mut self,
        cfg: MentsConfig,
    ) -> Result<(Vec<QTrainItem>, usize), SoftDqnError> {
        let env = Arc::clone(&self.env);
        let mut items = Vec::new();
        for _ in 0..self.cfg.batch {
            let (traj, targets, _) =
                ments::sample_with_targets(&*env, &self.target, &cfg, &mut self.rng)?;
            for t in 0..traj.len() {
                let parent = &traj.states[t];
                let mut mask = vec![false; env.action_space()];
                for a in env.valid_actions(parent)? {
                    mask[a] = true;
                }
                items.push(QTrainItem {
                    encoded: env.encode(parent),
                    mask,
                    action: traj.actions[t],
                    target: targets[t],
                    weight: 1.0,
                });
            }
        }
        Ok((items, self.cfg.batch))
    }

    /// One optimization unit: sample a batch of trajectories, build targets,
    /// take one Adam step, and hard-update the target net on schedule. Reward
    /// calls advance by exactly the batch size.
    pub fn train_iteration(&mut self) -> Result<IterationStats, SoftDqnError> {
        let batch = self.cfg.batch;
        let (items, sampled, replay_ids) = match &mut self.mode {
            TrainMode::OnPolicy => {
                let trajs = sample_softmax_trajectories(
                    &*self.env,
                    &self.online,
                    batch,
                    self.cfg.explore_eps,
                    &mut self.rng,
                )?;
                let mut records = Vec::new();
                for t in &trajs {
                    records.extend(transitions_of(t)?);
                }
                let items = self.items_for(&records, None)?;
                (items, batch, None)
            }
            TrainMode::Replay { .. } => {
                let trajs = sample_softmax_trajectories(
                    &*self.env,
                    &self.online,
                    batch,
                    self.cfg.explore_eps,
                    &mut self.rng,
                )?;
                let mut pushed = 0;
                let (beta0, horizon) = match &self.mode {
                    TrainMode::Replay { beta0, horizon, .. } => (*beta0, *horizon),
                    _ => unreachable!(),
                };
                let beta = beta0
                    + (1.0 - beta0) * ((self.iteration as f64) / (horizon.max(1) as f64)).min(1.0);
                let sample = {
                    let buffer = match &mut self.mode {
                        TrainMode::Replay { buffer, .. } => buffer,
                        _ => unreachable!(),
                    };
                    for t in &trajs {
                        for record in transitions_of(t)? {
                            buffer.push(record);
                            pushed += 1;
                        }
                    }
                    buffer.sample(pushed, beta, &mut self.rng)?
                };
                let items = self.items_for(&sample.records, Some(&sample.weights))?;
                (items, batch, Some(sample.ids))
            }
            TrainMode::MentsTargets(cfg) => {
                let cfg = *cfg;
                let (items, sampled) = self.items_from_ments(cfg)?;
                (items, sampled, None)
            }
        };
        let (grads, loss, residuals) = q_loss_backward(&self.online, &items, self.cfg.loss)?;
        self.adam.step(&mut self.online, &grads);
        if let (Some(ids), TrainMode::Replay { buffer, .. }) = (replay_ids, &mut self.mode) {
            buffer.update_priorities(&ids, &residuals);
        }
        self.iteration += 1;
        self.trajectories += sampled as u64;
        self.reward_calls += sampled as u64;
        if self.iteration % self.cfg.target_period == 0 {
            hard_update(&mut self.target, &self.online);
        }
        Ok(IterationStats {
            loss,
            transitions: items.len(),
        })
    }
}
