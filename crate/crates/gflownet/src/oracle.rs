//! Exact ground truth on enumerable environments.
//!
//! A reverse-topological sweep computes state and edge flows in log space:
//! terminals carry `F(x) = R(x)`, edges satisfy `F(s->s') = P_B(s|s') F(s')`,
//! and interior states sum their outgoing edge flows. The optimal soft
//! Q-values and policy fall out as `Q*(s,s') = log F(s->s')`,
//! `V*(s) = log F(s)`, `pi*(s'|s) = F(s->s')/F(s)`, with `Z = F(s0)`.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, Trajectory};
use crate::nn::{NnError, TabularQ};
use crate::numerics::{logsumexp, sample_categorical, NEG_Q};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("oracle invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug)]
pub struct OracleEdge {
    pub action: usize,
    pub child: usize,
    /// Uniform backward log-probability of this edge, -log |parents(child)|.
    pub log_pb: f64,
    /// Q*(s, s') = log F(s -> s').
    pub log_flow: f64,
}

pub struct OracleTables {
    states: Vec<EnvState>,
    index: HashMap<EnvState, usize>,
    /// V*(s) = log F(s); log R(x) at terminals.
    log_state_flow: Vec<f64>,
    edges: Vec<Vec<OracleEdge>>,
    /// Incoming edges as (parent index, edge position within the parent).
    in_edges: Vec<Vec<(usize, usize)>>,
    topo: Vec<usize>,
    log_z: f64,
    action_space: usize,
}

impl OracleTables {
    /// Enumerate the DAG from s0 and solve for exact flows. Errors when more
    /// than `cap` states are reachable or a terminal has non-positive reward.
    pub fn exact_flows(env: &dyn Env, cap: usize) -> Result<Self, OracleError> {
        // breadth-first discovery
        let mut states = Vec::new();
        let mut index = HashMap::new();
        let s0 = env.initial_state();
        index.insert(s0.clone(), 0);
        states.push(s0);
        let mut children_raw: Vec<Vec<(usize, usize)>> = Vec::new(); // (action, child idx)
        let mut cursor = 0;
        while cursor < states.len() {
            let state = states[cursor].clone();
            let mut out = Vec::new();
            if !state.is_terminal() {
                for (action, child) in env.children(&state)?.iter() {
                    let next_idx = states.len();
                    let idx = *index.entry(child.clone()).or_insert_with(|| {
                        states.push(child.clone());
                        next_idx
                    });
                    out.push((action, idx));
                }
                if states.len() > cap {
                    return Err(EnvError::NotEnumerable { cap }.into());
                }
            }
            children_raw.push(out);
            cursor += 1;
        }
        let n = states.len();

        // Kahn topological order (also detects cycles)
        let mut in_deg = vec![0usize; n];
        for out in &children_raw {
            for &(_, c) in out {
                in_deg[c] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| in_deg[i] == 0).collect();
        if queue.len() != 1 {
            return Err(OracleError::Invariant(format!(
                "{} states without parents (expected only s0)",
                queue.len()
            )));
        }
        let mut topo = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            topo.push(i);
            for &(_, c) in &children_raw[i] {
                in_deg[c] -= 1;
                if in_deg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if topo.len() != n {
            return Err(OracleError::Invariant(
                "environment graph has a cycle".into(),
            ));
        }

        // reverse sweep: terminals seed log F with log R
        let mut log_state_flow = vec![f64::NAN; n];
        let mut edges: Vec<Vec<OracleEdge>> = vec![Vec::new(); n];
        let mut scratch = Vec::new();
        for &i in topo.iter().rev() {
            if states[i].is_terminal() {
                let r = env.reward(&states[i])?;
                if r <= 0.0 {
                    return Err(EnvError::NonPositiveReward(r).into());
                }
                log_state_flow[i] = r.ln();
                continue;
            }
            scratch.clear();
            let mut out = Vec::with_capacity(children_raw[i].len());
            for &(action, c) in &children_raw[i] {
                let log_pb = -(env.parent_count(&states[c])? as f64).ln();
                let log_flow = log_pb + log_state_flow[c];
                scratch.push(log_flow);
                out.push(OracleEdge {
                    action,
                    child: c,
                    log_pb,
                    log_flow,
                });
            }
            log_state_flow[i] = logsumexp(&scratch);
            edges[i] = out;
        }

        let mut in_edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (p, out) in edges.iter().enumerate() {
            for (pos, e) in out.iter().enumerate() {
                in_edges[e.child].push((p, pos));
            }
        }

        let log_z = log_state_flow[0];
        let index = states
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        Ok(OracleTables {
            states,
            index,
            log_state_flow,
            edges,
            in_edges,
            topo,
            log_z,
            action_space: env.action_space(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(|e| e.len()).sum()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }

    pub fn action_space(&self) -> usize {
        self.action_space
    }

    pub fn state(&self, i: usize) -> &EnvState {
        &self.states[i]
    }

    pub fn states(&self) -> &[EnvState] {
        &self.states
    }

    pub fn index_of(&self, state: &EnvState) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn edges_of(&self, i: usize) -> &[OracleEdge] {
        &self.edges[i]
    }

    /// State indices in topological order (s0 first, terminals last).
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// V*(s) = log F(s).
    pub fn v_star(&self, i: usize) -> f64 {
        self.log_state_flow[i]
    }

    /// Q*(s, .) over the full action space; invalid actions hold NEG_Q.
    pub fn q_star(&self, i: usize) -> Vec<f64> {
        let mut q = vec![NEG_Q; self.action_space];
        for e in &self.edges[i] {
            q[e.action] = e.log_flow;
        }
        q
    }

    /// pi*(.|s) over the full action space via edge flows.
    pub fn pi_star(&self, i: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.action_space];
        for e in &self.edges[i] {
            p[e.action] = (e.log_flow - self.log_state_flow[i]).exp();
        }
        p
    }

    pub fn terminal_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.states.len()).filter(|&i| self.states[i].is_terminal())
    }

    /// R(x)/Z per terminal state key.
    pub fn terminal_distribution(&self) -> HashMap<Box<[u8]>, f64> {
        self.terminal_indices()
            .map(|i| {
                (
                    self.states[i].key().to_vec().into_boxed_slice(),
                    (self.log_state_flow[i] - self.log_z).exp(),
                )
            })
            .collect()
    }

    /// Load Q* into a tabular evaluator for every non-terminal state.
    pub fn to_tabular(&self) -> Result<TabularQ, NnError> {
        TabularQ::new(
            self.action_space,
            (0..self.states.len())
                .filter(|&i| !self.states[i].is_terminal())
                .map(|i| (self.states[i].clone(), self.q_star(i))),
        )
    }

    /// Sample one complete trajectory from pi*.
    pub fn sample_pi_star(&self, rng: &mut impl Rng) -> Trajectory {
        let mut i = 0;
        let mut states = vec![self.states[0].clone()];
        let mut actions = Vec::new();
        let mut log_pf = Vec::new();
        let mut log_pb = Vec::new();
        let mut probs = Vec::new();
        while !self.states[i].is_terminal() {
            let out = &self.edges[i];
            probs.clear();
            probs.extend(
                out.iter()
                    .map(|e| (e.log_flow - self.log_state_flow[i]).exp()),
            );
            let pick = sample_categorical(&probs, rng);
            let e = &out[pick];
            actions.push(e.action);
            log_pf.push(e.log_flow - self.log_state_flow[i]);
            log_pb.push(e.log_pb);
            states.push(self.states[e.child].clone());
            i = e.child;
        }
        let reward = self.log_state_flow[i].exp();
        Trajectory {
            states,
            actions,
            log_pf,
            log_pb,
            reward,
        }
    }

    /// Verify the flow identities the sweep is supposed to guarantee:
    /// out/in flow matching at every interior state, the soft-Bellman fixed
    /// point on every edge, and agreement of the two pi* derivations.
    pub fn check_invariants(&self, tol_flow: f64, tol_pi: f64) -> Result<(), OracleError> {
        let mut scratch = Vec::new();
        for i in 0..self.states.len() {
            let terminal = self.states[i].is_terminal();
            // outgoing flow matching (all states except terminals)
            if !terminal {
                scratch.clear();
                scratch.extend(self.edges[i].iter().map(|e| e.log_flow));
                let out_sum = logsumexp(&scratch);
                if (out_sum - self.log_state_flow[i]).abs() > tol_flow {
                    return Err(OracleError::Invariant(format!(
                        "outgoing flow mismatch at state {i}: {} vs {}",
                        out_sum, self.log_state_flow[i]
                    )));
                }
            }
            // incoming flow matching (all states except s0)
            if i != 0 {
                scratch.clear();
                scratch.extend(
                    self.in_edges[i]
                        .iter()
                        .map(|&(p, pos)| self.edges[p][pos].log_flow),
                );
                let in_sum = logsumexp(&scratch);
                if (in_sum - self.log_state_flow[i]).abs() > tol_flow {
                    return Err(OracleError::Invariant(format!(
                        "incoming flow mismatch at state {i}"
                    )));
                }
            }
            // per-edge fixed point: Q*(s,s') = log P_B + V*(s'); and pi* duality
            if !terminal {
                let q = self.q_star(i);
                let valid: Vec<usize> = self.edges[i].iter().map(|e| e.action).collect();
                let softmax = crate::numerics::softmax_indexed(&q, &valid);
                let pi = self.pi_star(i);
                for e in &self.edges[i] {
                    let bellman = e.log_pb + self.log_state_flow[e.child];
                    if (e.log_flow - bellman).abs() > tol_flow {
                        return Err(OracleError::Invariant(format!(
                            "soft-Bellman identity broken on edge {i}->{}",
                            e.child
                        )));
                    }
                    if (softmax[e.action] - pi[e.action]).abs() > tol_pi {
                        return Err(OracleError::Invariant(format!(
                            "pi* derivations disagree at state {i} action {}: {} vs {}",
                            e.action, softmax[e.action], pi[e.action]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
