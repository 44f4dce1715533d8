//! Fixed-length binary strings generated in k-bit word chunks, rewarded by
//! exp(-2 * min Hamming distance) to a set of mode strings.
//!
//! A state is a sequence of `n/k` slots, each empty or holding a k-bit word;
//! filling any empty slot with any word is one action, so the global action
//! space has `(n/k) * 2^k` entries (`action = slot * 2^k + word`). A state
//! with no empty slot is terminal; there is no separate stop action.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ActionSet, Env, EnvError, EnvState};

/// The five 8-bit building blocks modes are concatenated from.
const BLOCKS: [[u8; 8]; 5] = [
    [0, 0, 0, 0, 0, 0, 0, 0],
    [1, 1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 1, 1, 1],
    [0, 0, 1, 1, 1, 1, 0, 0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct BitseqConfig {
    /// Total string length; a multiple of 8 and of `k`.
    pub n: usize,
    /// Word size, `k | n`.
    pub k: usize,
    /// Number of mode strings to sample (duplicates are kept).
    pub num_modes: usize,
    /// Seed for mode construction.
    pub mode_seed: u64,
}

impl BitseqConfig {
    pub fn new(n: usize, k: usize, num_modes: usize, mode_seed: u64) -> Self {
        BitseqConfig {
            n,
            k,
            num_modes,
            mode_seed,
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.n == 0 || self.n % 8 != 0 {
            return Err(EnvError::Config("bits.n must be a positive multiple of 8".into()));
        }
        if self.k == 0 || self.n % self.k != 0 {
            return Err(EnvError::Config("bits.k must divide bits.n".into()));
        }
        if self.k > 15 {
            return Err(EnvError::Config("bits.k must be <= 15".into()));
        }
        if self.num_modes == 0 {
            return Err(EnvError::Config("bits.modes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bit strings are packed least-significant-bit-first into u64 limbs:
/// string position `j` lives in limb `j / 64`, bit `j % 64`.
pub type PackedBits = Vec<u64>;

fn limbs_for(n: usize) -> usize {
    (n + 63) / 64
}

fn get_bit(bits: &[u64], j: usize) -> u8 {
    ((bits[j / 64] >> (j % 64)) & 1) as u8
}

fn set_bit(bits: &mut [u64], j: usize, v: u8) {
    if v != 0 {
        bits[j / 64] |= 1u64 << (j % 64);
    }
}

/// The mode strings defining the reward, with a packed representation for
/// fast min-Hamming queries.
#[derive(Clone, Debug)]
pub struct ModeSet {
    n: usize,
    modes: Vec<PackedBits>,
    distinct: usize,
}

impl ModeSet {
    /// Sample `num_modes` strings, each a concatenation of `n/8` random
    /// blocks (with replacement). Deterministic given the seed.
    pub fn build(cfg: &BitseqConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.mode_seed);
        let mut modes = Vec::with_capacity(cfg.num_modes);
        for _ in 0..cfg.num_modes {
            let mut bits = vec![0u64; limbs_for(cfg.n)];
            for byte in 0..cfg.n / 8 {
                let block = &BLOCKS[rng.gen_range(0..BLOCKS.len())];
                for (t, &b) in block.iter().enumerate() {
                    set_bit(&mut bits, byte * 8 + t, b);
                }
            }
            modes.push(bits);
        }
        let distinct = modes.iter().collect::<HashSet<_>>().len();
        Ok(ModeSet { n: cfg.n, modes, distinct })
    }

    /// Build from explicit '0'/'1' strings (primarily for tests).
    pub fn from_bit_strings(strings: &[&str]) -> Result<Self, EnvError> {
        let n = strings
            .first()
            .map(|s| s.len())
            .ok_or_else(|| EnvError::Config("empty mode list".into()))?;
        let mut modes = Vec::with_capacity(strings.len());
        for s in strings {
            if s.len() != n {
                return Err(EnvError::Config("mode length mismatch".into()));
            }
            let mut bits = vec![0u64; limbs_for(n)];
            for (j, ch) in s.chars().enumerate() {
                match ch {
                    '0' => {}
                    '1' => set_bit(&mut bits, j, 1),
                    _ => return Err(EnvError::Config("modes must be 0/1 strings".into())),
                }
            }
            modes.push(bits);
        }
        let distinct = modes.iter().collect::<HashSet<_>>().len();
        Ok(ModeSet { n, modes, distinct })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Number of distinct strings among the sampled modes.
    pub fn distinct_count(&self) -> usize {
        self.distinct
    }

    pub fn modes(&self) -> &[PackedBits] {
        &self.modes
    }

    /// Minimum Hamming distance from `x` to any mode (xor + popcount).
    pub fn min_hamming(&self, x: &[u64]) -> u32 {
        self.modes
            .iter()
            .map(|m| {
                m.iter()
                    .zip(x.iter())
                    .map(|(a, b)| (a ^ b).count_ones())
                    .sum::<u32>()
            })
            .min()
            .expect("mode set is non-empty")
    }

    /// exp(-2 * min Hamming distance).
    pub fn reward_of_bits(&self, x: &[u64]) -> f64 {
        (-2.0 * self.min_hamming(x) as f64).exp()
    }

    /// The evaluation strings: for every mode and every `0 <= i < n`, the
    /// mode with exactly `i` distinct random positions flipped.
    pub fn build_test_set(&self, seed: u64) -> Vec<PackedBits> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.modes.len() * self.n);
        let mut positions: Vec<usize> = (0..self.n).collect();
        for mode in &self.modes {
            for i in 0..self.n {
                // partial Fisher-Yates: the first i entries become the flips
                for t in 0..i {
                    let j = rng.gen_range(t..self.n);
                    positions.swap(t, j);
                }
                let mut bits = mode.clone();
                for &p in &positions[..i] {
                    bits[p / 64] ^= 1u64 << (p % 64);
                }
                out.push(bits);
            }
        }
        out
    }
}

pub struct Bitseq {
    cfg: BitseqConfig,
    modes: ModeSet,
    slots: usize,
    words: usize, // 2^k
}

impl Bitseq {
    pub fn new(cfg: BitseqConfig) -> Result<Self, EnvError> {
        let modes = ModeSet::build(&cfg)?;
        Self::with_modes(cfg, modes)
    }

    pub fn with_modes(cfg: BitseqConfig, modes: ModeSet) -> Result<Self, EnvError> {
        cfg.validate()?;
        if modes.n() != cfg.n {
            return Err(EnvError::Config("mode length differs from bits.n".into()));
        }
        let slots = cfg.n / cfg.k;
        let words = 1usize << cfg.k;
        Ok(Bitseq {
            cfg,
            modes,
            slots,
            words,
        })
    }

    pub fn config(&self) -> &BitseqConfig {
        &self.cfg
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Word id marking an empty slot.
    pub fn empty_word(&self) -> u16 {
        self.words as u16
    }

    /// Per-slot word ids; `empty_word()` marks empty slots.
    pub fn words_of(&self, state: &EnvState) -> Vec<u16> {
        state
            .key()
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect()
    }

    pub fn state_from_words(&self, words: &[u16]) -> EnvState {
        debug_assert_eq!(words.len(), self.slots);
        let mut key = Vec::with_capacity(2 * words.len());
        for &w in words {
            key.extend_from_slice(&w.to_le_bytes());
        }
        let terminal = words.iter().all(|&w| w != self.empty_word());
        EnvState::new(key, terminal)
    }

    /// Pack a terminal state into its bit string. Word bits are placed
    /// most-significant-bit-first within the slot's k positions.
    pub fn packed_bits(&self, state: &EnvState) -> Result<PackedBits, EnvError> {
        if !state.is_terminal() {
            return Err(EnvError::RewardOfNonTerminal);
        }
        let words = self.words_of(state);
        let mut bits = vec![0u64; limbs_for(self.cfg.n)];
        for (slot, &w) in words.iter().enumerate() {
            for t in 0..self.cfg.k {
                let bit = ((w >> (self.cfg.k - 1 - t)) & 1) as u8;
                set_bit(&mut bits, slot * self.cfg.k + t, bit);
            }
        }
        Ok(bits)
    }

    /// Terminal state holding exactly the given bit string.
    pub fn terminal_from_bits(&self, bits: &[u64]) -> EnvState {
        let mut words = vec![0u16; self.slots];
        for (slot, w) in words.iter_mut().enumerate() {
            let mut v: u16 = 0;
            for t in 0..self.cfg.k {
                v = (v << 1) | get_bit(bits, slot * self.cfg.k + t) as u16;
            }
            *w = v;
        }
        self.state_from_words(&words)
    }
}

impl Env for Bitseq {
    fn name(&self) -> &'static str {
        "bitseq"
    }

    fn action_space(&self) -> usize {
        self.slots * self.words
    }

    fn encoding_len(&self) -> usize {
        self.slots * (self.words + 1)
    }

    fn initial_state(&self) -> EnvState {
        self.state_from_words(&vec![self.empty_word(); self.slots])
    }

    fn children(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        let words = self.words_of(state);
        let mut entries = Vec::new();
        for (slot, &w) in words.iter().enumerate() {
            if w == self.empty_word() {
                let mut next = words.clone();
                for word in 0..self.words {
                    next[slot] = word as u16;
                    entries.push((slot * self.words + word, self.state_from_words(&next)));
                }
            }
        }
        Ok(ActionSet::new(self.action_space(), entries))
    }

    fn parents(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        let words = self.words_of(state);
        if words.iter().all(|&w| w == self.empty_word()) {
            return Err(EnvError::ParentsOfInitial);
        }
        let mut entries = Vec::new();
        for (slot, &w) in words.iter().enumerate() {
            if w != self.empty_word() {
                let mut prev = words.clone();
                prev[slot] = self.empty_word();
                entries.push((slot * self.words + w as usize, self.state_from_words(&prev)));
            }
        }
        Ok(ActionSet::new(self.action_space(), entries))
    }

    fn parent_count(&self, state: &EnvState) -> Result<usize, EnvError> {
        let filled = self
            .words_of(state)
            .iter()
            .filter(|&&w| w != self.empty_word())
            .count();
        if filled == 0 {
            return Err(EnvError::ParentsOfInitial);
        }
        Ok(filled)
    }

    fn apply(&self, state: &EnvState, action: usize) -> Result<EnvState, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        let slot = action / self.words;
        let word = action % self.words;
        let mut words = self.words_of(state);
        if slot >= self.slots || words[slot] != self.empty_word() {
            return Err(EnvError::InvalidAction {
                action,
                state: format!("{state:?}"),
            });
        }
        words[slot] = word as u16;
        Ok(self.state_from_words(&words))
    }

    fn valid_actions(&self, state: &EnvState) -> Result<Vec<usize>, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        let words = self.words_of(state);
        let mut acts = Vec::new();
        for (slot, &w) in words.iter().enumerate() {
            if w == self.empty_word() {
                acts.extend(slot * self.words..(slot + 1) * self.words);
            }
        }
        Ok(acts)
    }

    fn encode_into(&self, state: &EnvState, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.encoding_len());
        out.iter_mut().for_each(|v| *v = 0.0);
        for (slot, &w) in self.words_of(state).iter().enumerate() {
            out[slot * (self.words + 1) + w as usize] = 1.0;
        }
    }

    fn reward(&self, state: &EnvState) -> Result<f64, EnvError> {
        let bits = self.packed_bits(state)?;
        Ok(self.modes.reward_of_bits(&bits))
    }

    fn state_from_key(&self, key: &[u8]) -> EnvState {
        let words: Vec<u16> = key
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        self.state_from_words(&words)
    }

    fn describe(&self, state: &EnvState) -> String {
        if state.is_terminal() {
            let bits = self.packed_bits(state).expect("terminal state");
            (0..self.cfg.n)
                .map(|j| if get_bit(&bits, j) == 1 { '1' } else { '0' })
                .collect()
        } else {
            self.words_of(state)
                .iter()
                .map(|&w| {
                    if w == self.empty_word() {
                        "_".to_string()
                    } else {
                        format!("{w}")
                    }
                })
                .collect::<Vec<_>>()
                .join(",")
        }
    }
}
