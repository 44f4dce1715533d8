//! The deterministic DAG-environment contract shared by environments, trainers,
//! and the search engine.
//!
//! States form a finite DAG rooted at the initial state; terminal states carry
//! a positive reward. A fixed, environment-global action index space with
//! per-state validity masks lets a single network head serve every state.

use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

pub mod bitseq;
pub mod hypergrid;

pub use bitseq::{Bitseq, BitseqConfig, ModeSet};
pub use hypergrid::{Hypergrid, HypergridConfig};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("children() called on a terminal state")]
    ChildrenOfTerminal,
    #[error("parents() called on the initial state")]
    ParentsOfInitial,
    #[error("reward() called on a non-terminal state")]
    RewardOfNonTerminal,
    #[error("({parent}, {child}) is not an edge")]
    NotAnEdge { parent: String, child: String },
    #[error("invalid action {action} in state {state}")]
    InvalidAction { action: usize, state: String },
    #[error("state out of range: {0}")]
    OutOfRange(String),
    #[error("environment exceeds the enumeration cap of {cap} states")]
    NotEnumerable { cap: usize },
    #[error("terminal reward must be positive, got {0}")]
    NonPositiveReward(f64),
    #[error("invalid environment config: {0}")]
    Config(String),
}

/// One node of the environment DAG.
///
/// The canonical key is an injective byte encoding of the underlying state;
/// two states are equal iff their keys are equal, and the terminal flag is
/// always consistent with the key.
#[derive(Clone)]
pub struct EnvState {
    key: Box<[u8]>,
    terminal: bool,
}

impl EnvState {
    pub fn new(key: Vec<u8>, terminal: bool) -> Self {
        EnvState {
            key: key.into_boxed_slice(),
            terminal,
        }
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }
}

impl PartialEq for EnvState {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for EnvState {}

impl Hash for EnvState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key.hash(state);
    }
}

impl fmt::Debug for EnvState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EnvState({:02x?}{})",
            self.key,
            if self.terminal { ", terminal" } else { "" }
        )
    }
}

/// Valid moves out of (or into) a state: pairs of a global action index and
/// the state reached by that action. Ordering is deterministic given the
/// state (ascending action index).
#[derive(Clone, Debug)]
pub struct ActionSet {
    action_space: usize,
    entries: Vec<(usize, EnvState)>,
}

impl ActionSet {
    pub fn new(action_space: usize, entries: Vec<(usize, EnvState)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(entries.iter().all(|(a, _)| *a < action_space));
        ActionSet {
            action_space,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn action_space(&self) -> usize {
        self.action_space
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &EnvState)> {
        self.entries.iter().map(|(a, s)| (*a, s))
    }

    pub fn actions(&self) -> Vec<usize> {
        self.entries.iter().map(|(a, _)| *a).collect()
    }

    pub fn states(&self) -> impl Iterator<Item = &EnvState> {
        self.entries.iter().map(|(_, s)| s)
    }

    pub fn state_for(&self, action: usize) -> Option<&EnvState> {
        self.entries
            .binary_search_by_key(&action, |(a, _)| *a)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn contains_state(&self, state: &EnvState) -> bool {
        self.entries.iter().any(|(_, s)| s == state)
    }

    /// Full validity mask over the global action space.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.action_space];
        for (a, _) in &self.entries {
            m[*a] = true;
        }
        m
    }
}

/// A complete path from the initial state to a terminal state, with the
/// per-step forward/backward log-probabilities it was sampled under and the
/// terminal reward.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<usize>,
    pub log_pf: Vec<f64>,
    pub log_pb: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    /// Number of transitions (>= 1 for a complete trajectory).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn terminal(&self) -> &EnvState {
        self.states.last().expect("trajectory has states")
    }

    pub fn sum_log_pf(&self) -> f64 {
        self.log_pf.iter().sum()
    }

    pub fn sum_log_pb(&self) -> f64 {
        self.log_pb.iter().sum()
    }

    /// Check the structural invariants against an environment: starts at the
    /// initial state, ends terminal, every consecutive pair is a DAG edge.
    pub fn validate(&self, env: &dyn Env) -> Result<(), EnvError> {
        if self.states.len() != self.actions.len() + 1 || self.actions.is_empty() {
            return Err(EnvError::Config("trajectory shape mismatch".into()));
        }
        if self.states[0] != env.initial_state() {
            return Err(EnvError::Config("trajectory does not start at s0".into()));
        }
        if !self.terminal().is_terminal() {
            return Err(EnvError::Config("trajectory does not end terminal".into()));
        }
        for (i, &a) in self.actions.iter().enumerate() {
            let next = env.apply(&self.states[i], a)?;
            if next != self.states[i + 1] {
                return Err(EnvError::NotAnEdge {
                    parent: format!("{:?}", self.states[i]),
                    child: format!("{:?}", self.states[i + 1]),
                });
            }
        }
        Ok(())
    }
}

/// A deterministic DAG environment. All methods are read-only functions of
/// the state and may be called concurrently.
pub trait Env: Send + Sync {
    /// Short stable identifier, used in metrics and manifests.
    fn name(&self) -> &'static str;

    /// Size of the global action index space.
    fn action_space(&self) -> usize;

    /// Length of the feature vector produced by `encode_into`.
    fn encoding_len(&self) -> usize;

    fn initial_state(&self) -> EnvState;

    /// All states reachable in one step. Errors on terminal states.
    fn children(&self, state: &EnvState) -> Result<ActionSet, EnvError>;

    /// All states this one is reachable from in one step, tagged with the
    /// forward action that leads back here. Errors on the initial state.
    fn parents(&self, state: &EnvState) -> Result<ActionSet, EnvError>;

    /// Number of parents; cheap formula per environment.
    fn parent_count(&self, state: &EnvState) -> Result<usize, EnvError> {
        Ok(self.parents(state)?.len())
    }

    /// Apply one action. Errors if the action is invalid in this state.
    fn apply(&self, state: &EnvState, action: usize) -> Result<EnvState, EnvError> {
        self.children(state)?
            .state_for(action)
            .cloned()
            .ok_or_else(|| EnvError::InvalidAction {
                action,
                state: format!("{state:?}"),
            })
    }

    /// Valid action indices in this state, ascending.
    fn valid_actions(&self, state: &EnvState) -> Result<Vec<usize>, EnvError> {
        Ok(self.children(state)?.actions())
    }

    /// One-hot style feature encoding, injective on the state space.
    fn encode_into(&self, state: &EnvState, out: &mut [f64]);

    fn encode(&self, state: &EnvState) -> Vec<f64> {
        let mut v = vec![0.0; self.encoding_len()];
        self.encode_into(state, &mut v);
        v
    }

    /// Terminal reward, strictly positive. Errors on non-terminal states.
    fn reward(&self, state: &EnvState) -> Result<f64, EnvError>;

    /// Rebuild a state from its canonical key.
    fn state_from_key(&self, key: &[u8]) -> EnvState;

    /// Human-readable rendering for reports and debugging.
    fn describe(&self, state: &EnvState) -> String {
        state
            .key()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    }

    /// log P_B(parent | child) for the uniform backward policy,
    /// i.e. -log |parents(child)|. Errors if (parent, child) is not an edge.
    fn log_pb_uniform(&self, parent: &EnvState, child: &EnvState) -> Result<f64, EnvError> {
        let kids = self.children(parent)?;
        if !kids.contains_state(child) {
            return Err(EnvError::NotAnEdge {
                parent: format!("{parent:?}"),
                child: format!("{child:?}"),
            });
        }
        Ok(-(self.parent_count(child)? as f64).ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{enumerate_states, ChainEnv};

    #[test]
    fn states_equal_iff_keys_equal() {
        let a = EnvState::new(vec![1, 2, 3], false);
        let b = EnvState::new(vec![1, 2, 3], false);
        let c = EnvState::new(vec![1, 2, 4], false);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn action_set_mask_and_lookup() {
        let s = EnvState::new(vec![0], false);
        let t = EnvState::new(vec![1], false);
        let set = ActionSet::new(4, vec![(1, s.clone()), (3, t.clone())]);
        assert_eq!(set.mask(), vec![false, true, false, true]);
        assert_eq!(set.state_for(3), Some(&t));
        assert_eq!(set.state_for(0), None);
        assert!(set.contains_state(&s));
    }

    #[test]
    fn chain_env_is_a_single_path() {
        let env = ChainEnv::new(3, 2.0);
        let states = enumerate_states(&env);
        assert_eq!(states.len(), 4);
        let s0 = env.initial_state();
        assert_eq!(env.children(&s0).unwrap().len(), 1);
        assert!(env.parents(&s0).is_err());
        let last = states.last().unwrap();
        assert!(last.is_terminal());
        assert!(env.children(last).is_err());
        assert_eq!(env.reward(last).unwrap(), 2.0);
    }
}
