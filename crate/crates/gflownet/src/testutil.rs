//! Tiny environments and helpers shared by the unit tests.

use std::collections::{HashSet, VecDeque};

use crate::env::{ActionSet, Env, EnvError, EnvState};

/// A single path s0 -> 1 -> ... -> len (terminal), one action, fixed reward.
pub struct ChainEnv {
    pub len: usize,
    pub reward: f64,
}

impl ChainEnv {
    pub fn new(len: usize, reward: f64) -> Self {
        assert!(len >= 1);
        ChainEnv { len, reward }
    }

    fn state(&self, i: usize) -> EnvState {
        EnvState::new(vec![i as u8], i == self.len)
    }

    fn pos(&self, s: &EnvState) -> usize {
        s.key()[0] as usize
    }
}

impl Env for ChainEnv {
    fn name(&self) -> &'static str {
        "chain"
    }

    fn action_space(&self) -> usize {
        1
    }

    fn encoding_len(&self) -> usize {
        self.len + 1
    }

    fn initial_state(&self) -> EnvState {
        self.state(0)
    }

    fn children(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        let i = self.pos(state);
        Ok(ActionSet::new(1, vec![(0, self.state(i + 1))]))
    }

    fn parents(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        let i = self.pos(state);
        if i == 0 {
            return Err(EnvError::ParentsOfInitial);
        }
        Ok(ActionSet::new(1, vec![(0, self.state(i - 1))]))
    }

    fn encode_into(&self, state: &EnvState, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[self.pos(state)] = 1.0;
    }

    fn reward(&self, state: &EnvState) -> Result<f64, EnvError> {
        if !state.is_terminal() {
            return Err(EnvError::RewardOfNonTerminal);
        }
        Ok(self.reward)
    }

    fn state_from_key(&self, key: &[u8]) -> EnvState {
        self.state(key[0] as usize)
    }
}

/// s0 fans out to one terminal per reward entry.
pub struct FanEnv {
    pub rewards: Vec<f64>,
}

impl FanEnv {
    pub fn new(rewards: Vec<f64>) -> Self {
        assert!(!rewards.is_empty());
        FanEnv { rewards }
    }

    fn terminal(&self, i: usize) -> EnvState {
        EnvState::new(vec![1, i as u8], true)
    }
}

impl Env for FanEnv {
    fn name(&self) -> &'static str {
        "fan"
    }

    fn action_space(&self) -> usize {
        self.rewards.len()
    }

    fn encoding_len(&self) -> usize {
        self.rewards.len() + 1
    }

    fn initial_state(&self) -> EnvState {
        EnvState::new(vec![0, 0], false)
    }

    fn children(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        Ok(ActionSet::new(
            self.rewards.len(),
            (0..self.rewards.len()).map(|i| (i, self.terminal(i))).collect(),
        ))
    }

    fn parents(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        if !state.is_terminal() {
            return Err(EnvError::ParentsOfInitial);
        }
        let i = state.key()[1] as usize;
        Ok(ActionSet::new(self.rewards.len(), vec![(i, self.initial_state())]))
    }

    fn encode_into(&self, state: &EnvState, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if state.is_terminal() {
            out[1 + state.key()[1] as usize] = 1.0;
        } else {
            out[0] = 1.0;
        }
    }

    fn reward(&self, state: &EnvState) -> Result<f64, EnvError> {
        if !state.is_terminal() {
            return Err(EnvError::RewardOfNonTerminal);
        }
        Ok(self.rewards[state.key()[1] as usize])
    }

    fn state_from_key(&self, key: &[u8]) -> EnvState {
        EnvState::new(key.to_vec(), key[0] == 1)
    }
}

/// Breadth-first enumeration of every state reachable from s0.
pub fn enumerate_states(env: &dyn Env) -> Vec<EnvState> {
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    let s0 = env.initial_state();
    seen.insert(s0.clone());
    queue.push_back(s0.clone());
    order.push(s0);
    while let Some(s) = queue.pop_front() {
        if s.is_terminal() {
            continue;
        }
        for (_, child) in env.children(&s).unwrap().iter() {
            if seen.insert(child.clone()) {
                queue.push_back(child.clone());
                order.push(child.clone());
            }
        }
    }
    order
}
