//! Maximum-entropy Monte Carlo tree search over the environment DAG.
//!
//! Each search round samples a root-to-leaf path from an epsilon-smoothed
//! softmax of the edge estimates Q_tree, expands the leaf with the Q
//! evaluator, and backs the soft-Bellman value
//! `Q_tree(s,s') = log P_B(s|s') + logsumexp(Q_tree(s',.))` up the path.
//! Edges into terminal states keep their network initialization unless the
//! search is granted reward access, in which case they take
//! `log P_B + log R`. Acting samples the plain softmax of the root edges and
//! re-roots onto the chosen child, keeping its subtree.
//!
//! The DAG need not be a tree: a state reached along different paths simply
//! occupies several tree nodes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, Trajectory};
use crate::metrics::{MetricsError, PolicyEvaluator};
use crate::nn::{NnError, QFunction};
use crate::numerics::{fnv1a64, logsumexp, sample_categorical, softmax};

#[derive(Debug, Error)]
pub enum MentsError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("tree policy requested on an unexpanded node")]
    Unexpanded,
    #[error("no tree edge leads to the requested state")]
    NoSuchChild,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MentsConfig {
    /// Maximum root visit count; the per-step search budget.
    pub n_max: u32,
    /// Exploration constant of the tree policy.
    pub eps: f64,
    /// Allow reward calls during search; edges into terminals then take
    /// log P_B + log R instead of staying at their initialization.
    pub terminal_reward_access: bool,
}

impl MentsConfig {
    pub fn new(n_max: u32, eps: f64) -> Result<Self, MentsError> {
        if n_max < 1 {
            return Err(MentsError::Config("ments.rounds must be >= 1".into()));
        }
        if eps < 0.0 {
            return Err(MentsError::Config("ments.eps must be >= 0".into()));
        }
        Ok(MentsConfig {
            n_max,
            eps,
            terminal_reward_access: false,
        })
    }

    pub fn with_reward_access(mut self, value: bool) -> Self {
        self.terminal_reward_access = value;
        self
    }
}

#[derive(Clone, Debug)]
struct Edge {
    action: usize,
    child: u32,
    q_tree: f64,
    log_pb: f64,
}

#[derive(Clone, Debug)]
struct Node {
    state: EnvState,
    visits: u32,
    expanded: bool,
    edges: Vec<Edge>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Completed search rounds.
    pub rounds: u64,
    /// Q evaluations triggered by round expansions (<= rounds).
    pub net_evals: u64,
    /// Extra Q evaluations used to back up training targets.
    pub target_evals: u64,
}

/// The chosen transition of one `act` step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub action: usize,
    pub child: EnvState,
    /// log of the root policy probability of the chosen edge.
    pub log_pf: f64,
    pub log_pb: f64,
    /// Search rounds this step ran (can be 0 on a retained subtree).
    pub rounds_run: u64,
}

/// Arena-allocated look-ahead tree owned by one sampling thread.
pub struct SearchTree {
    nodes: Vec<Node>,
    root: u32,
    stats: SearchStats,
    qbuf: Vec<f64>,
    path: Vec<(u32, u32)>,
}

impl SearchTree {
    pub fn new(root_state: EnvState) -> Self {
        SearchTree {
            nodes: vec![Node {
                state: root_state,
                visits: 0,
                expanded: false,
                edges: Vec::new(),
            }],
            root: 0,
            stats: SearchStats::default(),
            qbuf: Vec::new(),
            path: Vec::new(),
        }
    }

    pub fn root_state(&self) -> &EnvState {
        &self.nodes[self.root as usize].state
    }

    pub fn root_visits(&self) -> u32 {
        self.nodes[self.root as usize].visits
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn stats(&self) -> SearchStats {
        self.stats
    }

    /// Visit count and per-edge (action, q_tree) of the root, for inspection.
    pub fn root_edges(&self) -> Vec<(usize, f64)> {
        self.nodes[self.root as usize]
            .edges
            .iter()
            .map(|e| (e.action, e.q_tree))
            .collect()
    }

    /// Tree policy over the children of a node: an epsilon-smoothed softmax,
    /// `(1 - p_s) softmax(Q_tree) + p_s / |C|` with
    /// `p_s = min(1, eps |C| / ln(N + 2))`.
    pub fn tree_policy_probs(&self, node: u32, eps: f64) -> Result<Vec<f64>, MentsError> {
        let n = &self.nodes[node as usize];
        if !n.expanded || n.edges.is_empty() {
            return Err(MentsError::Unexpanded);
        }
        let q: Vec<f64> = n.edges.iter().map(|e| e.q_tree).collect();
        let mut probs = softmax(&q);
        let c = n.edges.len() as f64;
        let p_s = (eps * c / ((n.visits as f64) + 2.0).ln()).min(1.0);
        for p in probs.iter_mut() {
            *p = (1.0 - p_s) * *p + p_s / c;
        }
        Ok(probs)
    }

    fn expand(&mut self, node: u32, env: &dyn Env, q: &dyn QFunction) -> Result<(), MentsError> {
        let state = self.nodes[node as usize].state.clone();
        let qv = q.q_values(env, &state)?;
        let kids = env.children(&state)?;
        let mut edges = Vec::with_capacity(kids.len());
        for (action, child) in kids.iter() {
            let log_pb = -(env.parent_count(child)? as f64).ln();
            let child_id = self.nodes.len() as u32;
            self.nodes.push(Node {
                state: child.clone(),
                visits: 0,
                expanded: false,
                edges: Vec::new(),
            });
            edges.push(Edge {
                action,
                child: child_id,
                q_tree: qv[action],
                log_pb,
            });
        }
        let n = &mut self.nodes[node as usize];
        n.edges = edges;
        n.expanded = true;
        Ok(())
    }

    /// One search round: select a path, expand the leaf if non-terminal, and
    /// back the soft-Bellman estimates up the path. The root visit count is
    /// bumped at the start so the `visits < n_max` loop guard progresses.
    pub fn mcts_round(
        &mut self,
        env: &dyn Env,
        q: &dyn QFunction,
        cfg: &MentsConfig,
        rng: &mut impl Rng,
    ) -> Result<(), MentsError> {
        let root = self.root;
        self.nodes[root as usize].visits += 1;
        let mut path = std::mem::take(&mut self.path);
        path.clear();
        let mut cur = root;
        while self.nodes[cur as usize].expanded {
            let probs = self.tree_policy_probs(cur, cfg.eps)?;
            let pick = sample_categorical(&probs, rng) as u32;
            let child = self.nodes[cur as usize].edges[pick as usize].child;
            path.push((cur, pick));
            self.nodes[child as usize].visits += 1;
            cur = child;
        }
        if !self.nodes[cur as usize].state.is_terminal() {
            self.expand(cur, env, q)?;
            self.stats.net_evals += 1;
        }
        // bottom-up backup along the selected path
        let mut buf = std::mem::take(&mut self.qbuf);
        for &(node, edge_idx) in path.iter().rev() {
            let child = self.nodes[node as usize].edges[edge_idx as usize].child;
            if !self.nodes[child as usize].state.is_terminal() {
                buf.clear();
                buf.extend(self.nodes[child as usize].edges.iter().map(|e| e.q_tree));
                let value = logsumexp(&buf);
                let e = &mut self.nodes[node as usize].edges[edge_idx as usize];
                e.q_tree = e.log_pb + value;
            } else if cfg.terminal_reward_access {
                let r = env.reward(&self.nodes[child as usize].state)?;
                let e = &mut self.nodes[node as usize].edges[edge_idx as usize];
                e.q_tree = e.log_pb + r.ln();
            }
        }
        self.qbuf = buf;
        self.path = path;
        self.stats.rounds += 1;
        Ok(())
    }

    /// Run rounds until the root has been visited `n_max` times. Returns the
    /// number of rounds executed now (0 if a retained subtree already has
    /// enough visits).
    pub fn run_rounds(
        &mut self,
        env: &dyn Env,
        q: &dyn QFunction,
        cfg: &MentsConfig,
        rng: &mut impl Rng,
    ) -> Result<u64, MentsError> {
        let mut executed = 0;
        while self.nodes[self.root as usize].visits < cfg.n_max {
            self.mcts_round(env, q, cfg, rng)?;
            executed += 1;
        }
        Ok(executed)
    }

    /// Plain softmax of the root edge estimates (no exploration mix).
    pub fn root_policy(&self) -> Result<Vec<f64>, MentsError> {
        let root = &self.nodes[self.root as usize];
        if !root.expanded || root.edges.is_empty() {
            return Err(MentsError::Unexpanded);
        }
        let q: Vec<f64> = root.edges.iter().map(|e| e.q_tree).collect();
        Ok(softmax(&q))
    }

    /// Search, sample the next state from the root policy, and re-root onto
    /// it, retaining its subtree.
    pub fn act(
        &mut self,
        env: &dyn Env,
        q: &dyn QFunction,
        cfg: &MentsConfig,
        rng: &mut impl Rng,
    ) -> Result<StepOutcome, MentsError> {
        let (outcome, _) = self.act_inner(env, q, cfg, rng, false)?;
        Ok(outcome)
    }

    /// `act`, additionally returning the training target of the chosen edge:
    /// a guaranteed-fresh soft-Bellman backup for non-terminal children
    /// (expanding the child first if needed), or None for terminal children
    /// (the caller supplies log P_B + log R instead).
    pub fn act_with_target(
        &mut self,
        env: &dyn Env,
        q: &dyn QFunction,
        cfg: &MentsConfig,
        rng: &mut impl Rng,
    ) -> Result<(StepOutcome, Option<f64>), MentsError> {
        self.act_inner(env, q, cfg, rng, true)
    }

    fn act_inner(
        &mut self,
        env: &dyn Env,
        q: &dyn QFunction,
        cfg: &MentsConfig,
        rng: &mut impl Rng,
        want_target: bool,
    ) -> Result<(StepOutcome, Option<f64>), MentsError> {
        let rounds_run = self.run_rounds(env, q, cfg, rng)?;
        let probs = self.root_policy()?;
        let pick = sample_categorical(&probs, rng);
        let root = self.root as usize;
        let (child_id, action, log_pb) = {
            let e = &self.nodes[root].edges[pick];
            (e.child, e.action, e.log_pb)
        };
        let mut target = None;
        if want_target && !self.nodes[child_id as usize].state.is_terminal() {
            if !self.nodes[child_id as usize].expanded {
                self.expand(child_id, env, q)?;
                self.stats.target_evals += 1;
            }
            let mut buf = std::mem::take(&mut self.qbuf);
            buf.clear();
            buf.extend(self.nodes[child_id as usize].edges.iter().map(|e| e.q_tree));
            let value = log_pb + logsumexp(&buf);
            self.qbuf = buf;
            self.nodes[root].edges[pick].q_tree = value;
            target = Some(value);
        }
        let outcome = StepOutcome {
            action,
            child: self.nodes[child_id as usize].state.clone(),
            log_pf: probs[pick].ln(),
            log_pb,
            rounds_run,
        };
        self.reroot(child_id);
        Ok((outcome, target))
    }

    /// Follow the edge leading to `state` (after searching), returning the
    /// log-probability the root policy assigns to it. Used to score forced
    /// walks along externally chosen paths.
    pub fn advance_to(&mut self, state: &EnvState) -> Result<f64, MentsError> {
        let probs = self.root_policy()?;
        let root = &self.nodes[self.root as usize];
        let pick = root
            .edges
            .iter()
            .position(|e| &self.nodes[e.child as usize].state == state)
            .ok_or(MentsError::NoSuchChild)?;
        let log_pf = probs[pick].ln();
        let child = root.edges[pick].child;
        self.reroot(child);
        Ok(log_pf)
    }

    /// Drop everything but the chosen child's subtree; the child becomes the
    /// root of a freshly compacted arena.
    fn reroot(&mut self, child: u32) {
        let mut old: Vec<Option<Node>> = self.nodes.drain(..).map(Some).collect();
        let mut order: Vec<u32> = vec![child];
        let mut new_nodes: Vec<Node> = Vec::with_capacity(old.len());
        let mut qi = 0;
        while qi < order.len() {
            let old_id = order[qi] as usize;
            qi += 1;
            let mut node = old[old_id].take().expect("tree nodes have unique parents");
            for e in node.edges.iter_mut() {
                let new_id = order.len() as u32;
                order.push(e.child);
                e.child = new_id;
            }
            new_nodes.push(node);
        }
        self.nodes = new_nodes;
        self.root = 0;
    }

    /// Order-dependent content hash: shape, visit counts, and edge values.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::new();
        for n in &self.nodes {
            bytes.extend_from_slice(n.state.key());
            bytes.extend_from_slice(&n.visits.to_le_bytes());
            bytes.push(n.expanded as u8);
            for e in &n.edges {
                bytes.extend_from_slice(&(e.action as u64).to_le_bytes());
                bytes.extend_from_slice(&e.child.to_le_bytes());
                bytes.extend_from_slice(&e.q_tree.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// All (parent state, action, q_tree) triples currently in the tree.
    pub fn all_edges(&self) -> Vec<(EnvState, usize, f64)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for e in &n.edges {
                out.push((n.state.clone(), e.action, e.q_tree));
            }
        }
        out
    }
}

/// Sample one complete trajectory by repeated `act` from s0. The recorded
/// forward log-probabilities are those of the realized root policies.
pub fn sample_trajectory(
    env: &dyn Env,
    q: &dyn QFunction,
    cfg: &MentsConfig,
    rng: &mut impl Rng,
) -> Result<(Trajectory, SearchStats), MentsError> {
    let (traj, _, stats) = sample_inner(env, q, cfg, rng, false)?;
    Ok((traj, stats))
}

/// Sample a trajectory with MENTS (driven by the target network) and return
/// the per-transition training targets: fresh backups of the chosen edges for
/// non-terminal transitions, log P_B + log R for terminal ones.
pub fn sample_with_targets(
    env: &dyn Env,
    q_target: &dyn QFunction,
    cfg: &MentsConfig,
    rng: &mut impl Rng,
) -> Result<(Trajectory, Vec<f64>, SearchStats), MentsError> {
    let (traj, targets, stats) = sample_inner(env, q_target, cfg, rng, true)?;
    Ok((traj, targets, stats))
}

fn sample_inner(
    env: &dyn Env,
    q: &dyn QFunction,
    cfg: &MentsConfig,
    rng: &mut impl Rng,
    want_targets: bool,
) -> Result<(Trajectory, Vec<f64>, SearchStats), MentsError> {
    let mut tree = SearchTree::new(env.initial_state());
    let mut states = vec![env.initial_state()];
    let mut actions = Vec::new();
    let mut log_pf = Vec::new();
    let mut log_pb = Vec::new();
    let mut targets = Vec::new();
    while !tree.root_state().is_terminal() {
        let (outcome, target) = tree.act_inner(env, q, cfg, rng, want_targets)?;
        actions.push(outcome.action);
        log_pf.push(outcome.log_pf);
        log_pb.push(outcome.log_pb);
        states.push(outcome.child.clone());
        if want_targets {
            if let Some(t) = target {
                targets.push(t);
            } else {
                // terminal transition: log P_B + log R
                let r = env.reward(&outcome.child)?;
                targets.push(outcome.log_pb + r.ln());
            }
        }
    }
    let reward = env.reward(states.last().unwrap())?;
    let traj = Trajectory {
        states,
        actions,
        log_pf,
        log_pb,
        reward,
    };
    Ok((traj, targets, tree.stats()))
}

/// Forward-policy evaluator that scores a path with MENTS look-ahead: at each
/// step it searches with the configured budget, scores the forced transition
/// under the root policy, and re-roots. Deterministic per (seed, path).
pub struct MentsPolicy<'a> {
    pub q: &'a dyn QFunction,
    pub cfg: MentsConfig,
    pub seed: u64,
}

impl PolicyEvaluator for MentsPolicy<'_> {
    fn log_pf_path(&self, env: &dyn Env, states: &[EnvState]) -> Result<Vec<f64>, MetricsError> {
        let mut bytes = Vec::new();
        for s in states {
            bytes.extend_from_slice(s.key());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(&bytes));
        let mut tree = SearchTree::new(states[0].clone());
        let mut out = Vec::with_capacity(states.len().saturating_sub(1));
        for next in &states[1..] {
            tree.run_rounds(env, self.q, &self.cfg, &mut rng)
                .map_err(ments_to_metrics)?;
            out.push(tree.advance_to(next).map_err(ments_to_metrics)?);
        }
        Ok(out)
    }
}

fn ments_to_metrics(e: MentsError) -> MetricsError {
    match e {
        MentsError::Env(inner) => MetricsError::Env(inner),
        MentsError::Nn(inner) => MetricsError::Nn(inner),
        other => MetricsError::Env(EnvError::Config(other.to_string())),
    }
}
