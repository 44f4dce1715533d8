//! Transition storage for off-policy training: a FIFO ring buffer with
//! either uniform or proportional prioritized sampling (sum tree).

use rand::Rng;
use thiserror::Error;

use crate::env::EnvError;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("batch size must be >= 1")]
    BadBatch,
}

/// One stored transition. Terminal records carry a finite log R; the reward
/// of a reachable terminal must be positive so its log stays finite.
#[derive(Clone, Debug)]
pub struct Transition {
    pub parent_key: Box<[u8]>,
    pub action: usize,
    pub child_key: Box<[u8]>,
    pub terminal: bool,
    pub log_pb: f64,
    pub log_reward: f64,
}

impl Transition {
    pub fn step(parent_key: &[u8], action: usize, child_key: &[u8], log_pb: f64) -> Self {
        Transition {
            parent_key: parent_key.to_vec().into_boxed_slice(),
            action,
            child_key: child_key.to_vec().into_boxed_slice(),
            terminal: false,
            log_pb,
            log_reward: f64::NAN,
        }
    }

    pub fn terminal(
        parent_key: &[u8],
        action: usize,
        child_key: &[u8],
        log_pb: f64,
        reward: f64,
    ) -> Result<Self, EnvError> {
        if !(reward > 0.0) || !reward.is_finite() {
            return Err(EnvError::NonPositiveReward(reward));
        }
        Ok(Transition {
            parent_key: parent_key.to_vec().into_boxed_slice(),
            action,
            child_key: child_key.to_vec().into_boxed_slice(),
            terminal: true,
            log_pb,
            log_reward: reward.ln(),
        })
    }
}

/// Fixed-shape binary sum tree over `leaves` slots (power of two).
struct SumTree {
    leaves: usize,
    tree: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two().max(1);
        SumTree {
            leaves,
            tree: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.tree[1]
    }

    fn get(&self, slot: usize) -> f64 {
        self.tree[self.leaves + slot]
    }

    fn set(&mut self, slot: usize, value: f64) {
        let mut i = self.leaves + slot;
        self.tree[i] = value;
        while i > 1 {
            i /= 2;
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1];
        }
    }

    /// Slot whose cumulative range contains `target` in [0, total).
    fn find(&self, mut target: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.tree[2 * i];
            if target < left {
                i = 2 * i;
            } else {
                target -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReplayMode {
    Uniform,
    Prioritized { alpha: f64 },
}

pub struct SampleBatch {
    /// Monotone insertion ids; pass them back to `update_priorities`.
    pub ids: Vec<u64>,
    pub records: Vec<Transition>,
    /// Importance weights, normalized so the batch maximum is 1.
    pub weights: Vec<f64>,
}

/// FIFO transition store with proportional sampling. New records enter at the
/// maximum priority seen so far; the sum tree holds priority^alpha.
pub struct ReplayBuffer {
    mode: ReplayMode,
    capacity: usize,
    slots: Vec<Transition>,
    ids: Vec<u64>,
    next_id: u64,
    tree: SumTree,
    max_seen: f64,
    stale_skips: u64,
}

const PRIORITY_FLOOR: f64 = 1e-6;

impl ReplayBuffer {
    pub fn new(capacity: usize, mode: ReplayMode) -> Self {
        assert!(capacity >= 1);
        ReplayBuffer {
            mode,
            capacity,
            slots: Vec::new(),
            ids: Vec::new(),
            next_id: 0,
            tree: SumTree::new(capacity),
            max_seen: 1.0,
            stale_skips: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    /// Number of priority updates dropped because the record was evicted.
    pub fn stale_skips(&self) -> u64 {
        self.stale_skips
    }

    fn alpha(&self) -> f64 {
        match self.mode {
            ReplayMode::Uniform => 0.0,
            ReplayMode::Prioritized { alpha } => alpha,
        }
    }

    pub fn push(&mut self, record: Transition) {
        let id = self.next_id;
        self.next_id += 1;
        let slot = (id % self.capacity as u64) as usize;
        if slot == self.slots.len() {
            self.slots.push(record);
            self.ids.push(id);
        } else {
            // FIFO eviction: the oldest record lives in this slot
            self.slots[slot] = record;
            self.ids[slot] = id;
        }
        self.tree.set(slot, self.max_seen.powf(self.alpha()));
    }

    /// Draw `batch` records with replacement. In uniform mode all weights are
    /// 1; in prioritized mode P(i) is proportional to priority^alpha and
    /// w_i = (N * P(i))^-beta, normalized by the batch maximum.
    pub fn sample(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut impl Rng,
    ) -> Result<SampleBatch, ReplayError> {
        if self.slots.is_empty() {
            return Err(ReplayError::Empty);
        }
        if batch == 0 {
            return Err(ReplayError::BadBatch);
        }
        let n = self.slots.len();
        let mut ids = Vec::with_capacity(batch);
        let mut records = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        match self.mode {
            ReplayMode::Uniform => {
                for _ in 0..batch {
                    let slot = rng.gen_range(0..n);
                    ids.push(self.ids[slot]);
                    records.push(self.slots[slot].clone());
                    weights.push(1.0);
                }
            }
            ReplayMode::Prioritized { .. } => {
                let total = self.tree.total();
                for _ in 0..batch {
                    let u: f64 = rng.gen::<f64>() * total;
                    let mut slot = self.tree.find(u);
                    if slot >= n {
                        slot = n - 1;
                    }
                    let p = self.tree.get(slot) / total;
                    ids.push(self.ids[slot]);
                    records.push(self.slots[slot].clone());
                    weights.push((n as f64 * p).powf(-beta));
                }
                let max_w = weights.iter().cloned().fold(f64::MIN, f64::max);
                for w in weights.iter_mut() {
                    *w /= max_w;
                }
            }
        }
        Ok(SampleBatch {
            ids,
            records,
            weights,
        })
    }

    /// Set priority |td| + 1e-6 for each sampled id. Ids whose record has been
    /// evicted since sampling are skipped and counted.
    pub fn update_priorities(&mut self, ids: &[u64], td_errors: &[f64]) {
        debug_assert_eq!(ids.len(), td_errors.len());
        let alpha = self.alpha();
        for (&id, &td) in ids.iter().zip(td_errors) {
            let slot = (id % self.capacity as u64) as usize;
            if slot >= self.ids.len() || self.ids[slot] != id {
                self.stale_skips += 1;
                continue;
            }
            let priority = td.abs() + PRIORITY_FLOOR;
            if priority > self.max_seen {
                self.max_seen = priority;
            }
            self.tree.set(slot, priority.powf(alpha));
        }
    }

    /// Total of priority^alpha over live records (sum-tree root).
    pub fn priority_total(&self) -> f64 {
        self.tree.total()
    }

    /// Current priority^alpha of the record with this id, if still live.
    pub fn priority_pow_alpha(&self, id: u64) -> Option<f64> {
        let slot = (id % self.capacity as u64) as usize;
        if slot < self.ids.len() && self.ids[slot] == id {
            Some(self.tree.get(slot))
        } else {
            None
        }
    }
}
