//! D-dimensional hypergrid with a corner-mode reward.
//!
//! Non-terminal states are integer coordinate vectors in `[0, H)^D`; each has a
//! terminal copy reached through a dedicated stop action. Action indices
//! `0..D` increment the matching coordinate, action `D` moves to the terminal
//! copy, so the global action space has `D + 1` entries.

use super::{ActionSet, Env, EnvError, EnvState};

/// Configuration for [`Hypergrid`]. The reward constants default to the
/// standard corner-mode landscape; tests may flatten it.
#[derive(Clone, Debug, PartialEq)]
pub struct HypergridConfig {
    pub dim: usize,
    pub side: usize,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
}

impl HypergridConfig {
    pub fn new(dim: usize, side: usize) -> Self {
        HypergridConfig {
            dim,
            side,
            r0: 1e-3,
            r1: 0.5,
            r2: 2.0,
        }
    }
}

pub struct Hypergrid {
    cfg: HypergridConfig,
}

impl Hypergrid {
    pub fn new(cfg: HypergridConfig) -> Result<Self, EnvError> {
        if cfg.dim < 1 {
            return Err(EnvError::Config("grid.dim must be >= 1".into()));
        }
        if cfg.side < 2 {
            return Err(EnvError::Config("grid.side must be >= 2".into()));
        }
        if cfg.side > u16::MAX as usize {
            return Err(EnvError::Config("grid.side too large".into()));
        }
        if cfg.r0 <= 0.0 {
            return Err(EnvError::Config("grid.r0 must be > 0".into()));
        }
        Ok(Hypergrid { cfg })
    }

    pub fn config(&self) -> &HypergridConfig {
        &self.cfg
    }

    /// Build a state from coordinates; `terminal` selects the terminal copy.
    pub fn state(&self, coords: &[u16], terminal: bool) -> EnvState {
        debug_assert_eq!(coords.len(), self.cfg.dim);
        let mut key = Vec::with_capacity(1 + 2 * coords.len());
        key.push(terminal as u8);
        for &c in coords {
            key.extend_from_slice(&c.to_le_bytes());
        }
        EnvState::new(key, terminal)
    }

    pub fn coords_of(&self, state: &EnvState) -> Vec<u16> {
        let key = state.key();
        key[1..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect()
    }

    /// Two-indicator corner reward; strictly positive everywhere.
    pub fn reward_at(&self, coords: &[u16]) -> Result<f64, EnvError> {
        let h1 = (self.cfg.side - 1) as f64;
        let mut all_outer = true;
        let mut all_band = true;
        for &c in coords {
            if c as usize >= self.cfg.side {
                return Err(EnvError::OutOfRange(format!(
                    "coordinate {c} >= side {}",
                    self.cfg.side
                )));
            }
            let d = (c as f64 / h1 - 0.5).abs();
            all_outer &= 0.25 < d;
            all_band &= 0.3 < d && d < 0.4;
        }
        Ok(self.cfg.r0
            + self.cfg.r1 * if all_outer { 1.0 } else { 0.0 }
            + self.cfg.r2 * if all_band { 1.0 } else { 0.0 })
    }

    /// Number of terminal states, `H^D`, if it fits in a usize.
    pub fn terminal_count(&self) -> Option<usize> {
        let mut n: usize = 1;
        for _ in 0..self.cfg.dim {
            n = n.checked_mul(self.cfg.side)?;
        }
        Some(n)
    }

    /// All terminal coordinates with rewards. Errors when `H^D` exceeds `cap`.
    pub fn enumerate_terminals(&self, cap: usize) -> Result<Vec<(Vec<u16>, f64)>, EnvError> {
        let count = self
            .terminal_count()
            .filter(|&n| n <= cap)
            .ok_or(EnvError::NotEnumerable { cap })?;
        let mut out = Vec::with_capacity(count);
        let mut coords = vec![0u16; self.cfg.dim];
        loop {
            out.push((coords.clone(), self.reward_at(&coords)?));
            // odometer increment
            let mut i = 0;
            loop {
                if i == self.cfg.dim {
                    return Ok(out);
                }
                coords[i] += 1;
                if (coords[i] as usize) < self.cfg.side {
                    break;
                }
                coords[i] = 0;
                i += 1;
            }
        }
    }
}

impl Env for Hypergrid {
    fn name(&self) -> &'static str {
        "hypergrid"
    }

    fn action_space(&self) -> usize {
        self.cfg.dim + 1
    }

    fn encoding_len(&self) -> usize {
        self.cfg.dim * self.cfg.side + 1
    }

    fn initial_state(&self) -> EnvState {
        self.state(&vec![0u16; self.cfg.dim], false)
    }

    fn children(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        let coords = self.coords_of(state);
        let mut entries = Vec::with_capacity(self.cfg.dim + 1);
        for i in 0..self.cfg.dim {
            if (coords[i] as usize) + 1 < self.cfg.side {
                let mut next = coords.clone();
                next[i] += 1;
                entries.push((i, self.state(&next, false)));
            }
        }
        entries.push((self.cfg.dim, self.state(&coords, true)));
        Ok(ActionSet::new(self.action_space(), entries))
    }

    fn parents(&self, state: &EnvState) -> Result<ActionSet, EnvError> {
        let coords = self.coords_of(state);
        if state.is_terminal() {
            return Ok(ActionSet::new(
                self.action_space(),
                vec![(self.cfg.dim, self.state(&coords, false))],
            ));
        }
        if coords.iter().all(|&c| c == 0) {
            return Err(EnvError::ParentsOfInitial);
        }
        let mut entries = Vec::new();
        for i in 0..self.cfg.dim {
            if coords[i] > 0 {
                let mut prev = coords.clone();
                prev[i] -= 1;
                entries.push((i, self.state(&prev, false)));
            }
        }
        Ok(ActionSet::new(self.action_space(), entries))
    }

    fn parent_count(&self, state: &EnvState) -> Result<usize, EnvError> {
        let coords = self.coords_of(state);
        if state.is_terminal() {
            return Ok(1);
        }
        let n = coords.iter().filter(|&&c| c > 0).count();
        if n == 0 {
            return Err(EnvError::ParentsOfInitial);
        }
        Ok(n)
    }

    fn apply(&self, state: &EnvState, action: usize) -> Result<EnvState, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        let mut coords = self.coords_of(state);
        if action == self.cfg.dim {
            return Ok(self.state(&coords, true));
        }
        if action < self.cfg.dim && (coords[action] as usize) + 1 < self.cfg.side {
            coords[action] += 1;
            return Ok(self.state(&coords, false));
        }
        Err(EnvError::InvalidAction {
            action,
            state: format!("{state:?}"),
        })
    }

    fn valid_actions(&self, state: &EnvState) -> Result<Vec<usize>, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::ChildrenOfTerminal);
        }
        let coords = self.coords_of(state);
        let mut acts = Vec::with_capacity(self.cfg.dim + 1);
        for i in 0..self.cfg.dim {
            if (coords[i] as usize) + 1 < self.cfg.side {
                acts.push(i);
            }
        }
        acts.push(self.cfg.dim);
        Ok(acts)
    }

    fn encode_into(&self, state: &EnvState, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.encoding_len());
        out.iter_mut().for_each(|v| *v = 0.0);
        let coords = self.coords_of(state);
        for (i, &c) in coords.iter().enumerate() {
            out[i * self.cfg.side + c as usize] = 1.0;
        }
        if state.is_terminal() {
            out[self.cfg.dim * self.cfg.side] = 1.0;
        }
    }

    fn reward(&self, state: &EnvState) -> Result<f64, EnvError> {
        if !state.is_terminal() {
            return Err(EnvError::RewardOfNonTerminal);
        }
        self.reward_at(&self.coords_of(state))
    }

    fn state_from_key(&self, key: &[u8]) -> EnvState {
        EnvState::new(key.to_vec(), key[0] == 1)
    }

    fn describe(&self, state: &EnvState) -> String {
        let coords = self.coords_of(state);
        let body = coords
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        if state.is_terminal() {
            format!("({body})*")
        } else {
            format!("({body})")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dim: usize, side: usize) -> Hypergrid {
        Hypergrid::new(HypergridConfig::new(dim, side)).unwrap()
    }

    #[test]
    fn reward_matches_direct_formula_evaluation() {
        let g = grid(2, 8);
        // |0/7 - 0.5| = 0.5: outer indicator only
        assert!((g.reward_at(&[0, 0]).unwrap() - 0.501).abs() < 1e-15);
        // |1/7 - 0.5| ~ 0.357: both indicators
        assert!((g.reward_at(&[1, 1]).unwrap() - 2.501).abs() < 1e-15);
        // |2/7 - 0.5| ~ 0.214 fails the 0.25 threshold
        assert!((g.reward_at(&[2, 3]).unwrap() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn reward_rejects_out_of_range() {
        let g = grid(2, 8);
        assert!(g.reward_at(&[8, 0]).is_err());
    }

    #[test]
    fn reward_is_symmetric_under_permutation_and_reflection() {
        let g = grid(2, 8);
        for a in 0..8u16 {
            for b in 0..8u16 {
                let r = g.reward_at(&[a, b]).unwrap();
                assert_eq!(r, g.reward_at(&[b, a]).unwrap());
                assert_eq!(r, g.reward_at(&[7 - a, 7 - b]).unwrap());
                // every value is one of the four achievable sums
                let four = [0.001, 0.501, 2.001, 2.501];
                assert!(four.iter().any(|v| (r - v).abs() < 1e-15), "r = {r}");
            }
        }
    }

    #[test]
    fn enumerate_terminals_counts_and_z() {
        assert_eq!(grid(1, 2).enumerate_terminals(1000).unwrap().len(), 2);
        let g = grid(2, 8);
        let terms = g.enumerate_terminals(1000).unwrap();
        assert_eq!(terms.len(), 64);
        let z: f64 = terms.iter().map(|(_, r)| r).sum();
        let brute: f64 = (0..8u16)
            .flat_map(|a| (0..8u16).map(move |b| (a, b)))
            .map(|(a, b)| g.reward_at(&[a, b]).unwrap())
            .sum();
        assert!((z - brute).abs() < 1e-12);
        assert_eq!(grid(4, 8).enumerate_terminals(5000).unwrap().len(), 4096);
        assert!(matches!(
            grid(4, 32).enumerate_terminals(250_000),
            Err(EnvError::NotEnumerable { .. })
        ));
    }

    #[test]
    fn children_of_origin_and_far_corner() {
        let g = grid(2, 8);
        let s0 = g.initial_state();
        let kids = g.children(&s0).unwrap();
        assert_eq!(kids.len(), 3);
        assert_eq!(kids.actions(), vec![0, 1, 2]);
        assert_eq!(kids.state_for(0).unwrap(), &g.state(&[1, 0], false));
        assert_eq!(kids.state_for(1).unwrap(), &g.state(&[0, 1], false));
        assert_eq!(kids.state_for(2).unwrap(), &g.state(&[0, 0], true));

        let corner = g.state(&[7, 7], false);
        let kids = g.children(&corner).unwrap();
        assert_eq!(kids.len(), 1);
        assert_eq!(kids.state_for(2).unwrap(), &g.state(&[7, 7], true));

        assert!(g.children(&g.state(&[3, 3], true)).is_err());
    }

    #[test]
    fn parents_and_uniform_backward() {
        let g = grid(2, 8);
        let s = g.state(&[1, 1], false);
        let ps = g.parents(&s).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.state_for(0).unwrap(), &g.state(&[0, 1], false));
        assert_eq!(ps.state_for(1).unwrap(), &g.state(&[1, 0], false));

        let t = g.state(&[3, 2], true);
        let ps = g.parents(&t).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.state_for(2).unwrap(), &g.state(&[3, 2], false));

        assert!(g.parents(&g.initial_state()).is_err());

        // (2,2) has parents {(1,2),(2,1)}
        let c = g.state(&[2, 2], false);
        let lp = g
            .log_pb_uniform(&g.state(&[1, 2], false), &c)
            .unwrap();
        assert!((lp - (-(2.0f64).ln())).abs() < 1e-15);
        // terminal copies have a single parent: log 1 = 0
        let lp = g
            .log_pb_uniform(&g.state(&[3, 2], false), &t)
            .unwrap();
        assert_eq!(lp, 0.0);
        // non-edge pairs are rejected
        assert!(g
            .log_pb_uniform(&g.state(&[0, 0], false), &c)
            .is_err());
    }

    #[test]
    fn encoding_is_one_hot_per_coordinate() {
        let g = grid(2, 8);
        let e = g.encode(&g.state(&[3, 5], false));
        assert_eq!(e.len(), 17);
        assert_eq!(e[3], 1.0);
        assert_eq!(e[8 + 5], 1.0);
        assert_eq!(e[16], 0.0);
        assert_eq!(e.iter().sum::<f64>(), 2.0);

        let e0 = g.encode(&g.initial_state());
        assert_eq!(e0[0], 1.0);
        assert_eq!(e0[8], 1.0);

        let et = g.encode(&g.state(&[3, 5], true));
        assert_eq!(et[16], 1.0);
    }

    #[test]
    fn key_round_trip() {
        let g = grid(3, 5);
        let s = g.state(&[4, 0, 2], true);
        assert_eq!(g.state_from_key(s.key()), s);
    }
}
