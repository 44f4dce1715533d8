//! Minimal dense-network function approximator: batched forward/backward
//! passes, Adam, hard target updates, and a tabular drop-in used to run the
//! trainers and the search against exact oracle values.
//!
//! Everything is 64-bit; gradients are checked against central finite
//! differences in the tests.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvState};
use crate::numerics::NEG_Q;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in parameters")]
    NonFinite,
    #[error("tabular Q table is empty")]
    EmptyTable,
    #[error("state missing from tabular Q table")]
    UnknownState,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    /// Derivative recovered from the post-activation value (valid because the
    /// activation is strictly monotone through 0).
    #[inline]
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if y > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

/// Fully connected network. `weights[l]` has shape `sizes[l] x sizes[l+1]`;
/// the activation is applied after every layer except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl Mlp {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weights and biases.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let bound = 1.0 / (sizes[l] as f64).sqrt();
            let mut w = Matrix::zeros(sizes[l], sizes[l + 1]);
            for v in w.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            let mut b = vec![0.0; sizes[l + 1]];
            for v in b.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            weights.push(w);
            biases.push(b);
        }
        Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        Mlp {
            sizes: sizes.to_vec(),
            weights: (0..sizes.len() - 1)
                .map(|l| Matrix::zeros(sizes[l], sizes[l + 1]))
                .collect(),
            biases: (0..sizes.len() - 1).map(|l| vec![0.0; sizes[l + 1]]).collect(),
            activation,
        }
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn validate_finite(&self) -> Result<(), NnError> {
        let ok = self.weights.iter().all(|w| w.data.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(NnError::NonFinite)
        }
    }

    /// Batched inference: `input` is B x sizes[0], the result B x sizes.last().
    pub fn forward_batch(&self, input: &Matrix) -> Matrix {
        assert_eq!(input.cols, self.sizes[0]);
        let mut cur = input.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = affine(&cur, w, b);
            if l != last {
                for v in next.data.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            cur = next;
        }
        cur
    }

    /// Single-sample inference.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.sizes[0]);
        let mut cur = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.clone();
            for (i, &xi) in cur.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = w.row(i);
                for (o, n) in next.iter_mut().enumerate() {
                    *n += xi * wrow[o];
                }
            }
            if l != last {
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            cur = next;
        }
        cur
    }

    /// Forward pass keeping post-activation layer outputs for `backward`.
    pub fn forward_trace(&self, input: &Matrix) -> (Matrix, ForwardTrace) {
        assert_eq!(input.cols, self.sizes[0]);
        let mut hidden = Vec::with_capacity(self.weights.len() - 1);
        let mut cur = input.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = affine(&cur, w, b);
            if l != last {
                for v in next.data.iter_mut() {
                    *v = self.activation.apply(*v);
                }
                hidden.push(next.clone());
            }
            cur = next;
        }
        (cur, ForwardTrace { hidden })
    }

    /// Backpropagate arbitrary output cotangents `grad_out` (B x sizes.last())
    /// through the trace, returning parameter gradients.
    pub fn backward(&self, input: &Matrix, trace: &ForwardTrace, grad_out: &Matrix) -> Gradients {
        let layers = self.weights.len();
        assert_eq!(trace.hidden.len(), layers - 1);
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_out.clone();
        for l in (0..layers).rev() {
            let below: &Matrix = if l == 0 { input } else { &trace.hidden[l - 1] };
            // dW += below^T . delta ; db += colsum(delta)
            let gw = &mut grads.weights[l];
            for r in 0..below.rows {
                let xrow = below.row(r);
                let drow = delta.row(r);
                for (i, &xi) in xrow.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let grow = gw.row_mut(i);
                    for (o, g) in grow.iter_mut().enumerate() {
                        *g += xi * drow[o];
                    }
                }
                let gb = &mut grads.biases[l];
                for (o, g) in gb.iter_mut().enumerate() {
                    *g += drow[o];
                }
            }
            if l == 0 {
                break;
            }
            // delta_below = (delta . W^T) * act'(hidden)
            let w = &self.weights[l];
            let mut next_delta = Matrix::zeros(delta.rows, w.rows);
            for r in 0..delta.rows {
                let drow = delta.row(r);
                let hrow = below.row(r);
                let nrow = next_delta.row_mut(r);
                for i in 0..w.rows {
                    let wrow = w.row(i);
                    let mut acc = 0.0;
                    for (o, &d) in drow.iter().enumerate() {
                        acc += d * wrow[o];
                    }
                    nrow[i] = acc * self.activation.deriv_from_output(hrow[i]);
                }
            }
            delta = next_delta;
        }
        grads
    }
}

/// y = x.W + b with a zero-skip on x entries (inputs are mostly one-hot).
fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    debug_assert_eq!(x.cols, w.rows);
    let mut y = Matrix::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        let yrow = y.row_mut(r);
        yrow.copy_from_slice(b);
        let xrow = x.row(r);
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = w.row(i);
            for (o, v) in yrow.iter_mut().enumerate() {
                *v += xi * wrow[o];
            }
        }
    }
    y
}

/// Post-activation outputs of the hidden layers, newest last.
pub struct ForwardTrace {
    hidden: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            weights: mlp
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .flat_map(|w| w.data.iter().copied())
            .chain(self.biases.iter().flat_map(|b| b.iter().copied()))
    }
}

/// Adam with bias correction; `t` is incremented before the correction terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m_w: Vec<Matrix>,
    pub v_w: Vec<Matrix>,
    pub m_b: Vec<Vec<f64>>,
    pub v_b: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        AdamState {
            m_w: mlp.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect(),
            v_w: mlp.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect(),
            m_b: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for l in 0..params.weights.len() {
            adam_update(
                &mut params.weights[l].data,
                &grads.weights[l].data,
                &mut self.m_w[l].data,
                &mut self.v_w[l].data,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                c1,
                c2,
            );
            adam_update(
                &mut params.biases[l],
                &grads.biases[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                c1,
                c2,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Copy the online parameters into the target network.
pub fn hard_update(target: &mut Mlp, online: &Mlp) {
    target.clone_from(online);
}

/// Regression loss on the predicted Q of the taken action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Mse,
    Huber(f64),
}

impl Loss {
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            Loss::Mse => r * r,
            Loss::Huber(d) => {
                if r.abs() <= d {
                    0.5 * r * r
                } else {
                    d * (r.abs() - 0.5 * d)
                }
            }
        }
    }

    pub fn deriv(&self, r: f64) -> f64 {
        match *self {
            Loss::Mse => 2.0 * r,
            Loss::Huber(d) => r.clamp(-d, d),
        }
    }
}

/// One supervised example for the Q head: predict `target` at `action`.
#[derive(Clone, Debug)]
pub struct QTrainItem {
    pub encoded: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub target: f64,
    pub weight: f64,
}

/// Gradient of the mean weighted loss over the batch, plus the scalar loss
/// and the raw per-item residuals (prediction - target).
pub fn q_loss_backward(
    mlp: &Mlp,
    items: &[QTrainItem],
    loss: Loss,
) -> Result<(Gradients, f64, Vec<f64>), NnError> {
    if items.is_empty() {
        return Err(NnError::Shape("empty training batch".into()));
    }
    for it in items {
        if it.encoded.len() != mlp.input_len() {
            return Err(NnError::Shape(format!(
                "encoded length {} != input {}",
                it.encoded.len(),
                mlp.input_len()
            )));
        }
        if it.action >= mlp.output_len() || !it.mask.get(it.action).copied().unwrap_or(false) {
            return Err(NnError::Shape(format!("action {} invalid for item", it.action)));
        }
    }
    let input = Matrix::from_rows(items.iter().map(|i| i.encoded.clone()).collect());
    let (out, trace) = mlp.forward_trace(&input);
    let b = items.len() as f64;
    let mut grad_out = Matrix::zeros(out.rows, out.cols);
    let mut total = 0.0;
    let mut residuals = Vec::with_capacity(items.len());
    for (r, it) in items.iter().enumerate() {
        let res = out.get(r, it.action) - it.target;
        residuals.push(res);
        total += it.weight * loss.value(res);
        grad_out.set(r, it.action, it.weight * loss.deriv(res) / b);
    }
    let grads = mlp.backward(&input, &trace, &grad_out);
    Ok((grads, total / b, residuals))
}

/// Anything that yields per-action soft Q values for a state. Invalid actions
/// come back as the NEG_Q surrogate.
pub trait QFunction: Send + Sync {
    fn q_values(&self, env: &dyn Env, state: &EnvState) -> Result<Vec<f64>, NnError>;
}

impl QFunction for Mlp {
    fn q_values(&self, env: &dyn Env, state: &EnvState) -> Result<Vec<f64>, NnError> {
        if self.input_len() != env.encoding_len() || self.output_len() != env.action_space() {
            return Err(NnError::Shape("network does not match environment".into()));
        }
        let mut out = self.forward_one(&env.encode(state));
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

/// Exact per-state Q table with the same evaluation contract as the network.
pub struct TabularQ {
    action_space: usize,
    table: HashMap<Box<[u8]>, Vec<f64>>,
}

impl TabularQ {
    pub fn new(
        action_space: usize,
        entries: impl IntoIterator<Item = (EnvState, Vec<f64>)>,
    ) -> Result<Self, NnError> {
        let mut table = HashMap::new();
        for (s, q) in entries {
            if q.len() != action_space {
                return Err(NnError::Shape("tabular row length != action space".into()));
            }
            table.insert(s.key().to_vec().into_boxed_slice(), q);
        }
        if table.is_empty() {
            return Err(NnError::EmptyTable);
        }
        Ok(TabularQ {
            action_space,
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get_mut(&mut self, state: &EnvState) -> Option<&mut Vec<f64>> {
        self.table.get_mut(state.key())
    }
}

impl QFunction for TabularQ {
    fn q_values(&self, _env: &dyn Env, state: &EnvState) -> Result<Vec<f64>, NnError> {
        debug_assert_eq!(self.action_space, _env.action_space());
        self.table
            .get(state.key())
            .cloned()
            .ok_or(NnError::UnknownState)
    }
}

/// Captured ChaCha stream position, enough to resume a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// On-disk training state. JSON with shortest-round-trip float printing, so a
/// save/load cycle reproduces every parameter bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub env_config: BTreeMap<String, String>,
    pub algo: String,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub net: Mlp,
    pub adam: AdamState,
    pub rng: RngState,
    pub iteration: u64,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        self.net.validate_finite()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(NnError::Invalid(format!(
                "unsupported schema version {}",
                ckpt.schema_version
            )));
        }
        if ckpt.layer_sizes != ckpt.net.sizes {
            return Err(NnError::Invalid("layer_sizes disagree with net".into()));
        }
        ckpt.net.validate_finite()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::ChainEnv;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Straight-line re-evaluation of the network with independent code.
    fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in 0..mlp.weights.len() {
            let w = &mlp.weights[l];
            let mut next = vec![0.0; w.cols];
            for o in 0..w.cols {
                let mut acc = mlp.biases[l][o];
                for i in 0..w.rows {
                    acc += cur[i] * w.get(i, o);
                }
                next[o] = acc;
            }
            if l != mlp.weights.len() - 1 {
                for v in next.iter_mut() {
                    *v = if *v > 0.0 { *v } else { 0.01 * *v };
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&[4, 8, 3], Activation::LeakyRelu);
        let out = mlp.forward_one(&[1.0, -2.0, 0.5, 0.0]);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut mlp = Mlp::zeros(&[3, 3], Activation::LeakyRelu);
        for i in 0..3 {
            mlp.weights[0].set(i, i, 1.0);
        }
        let x = [0.3, -1.2, 7.0];
        assert_eq!(mlp.forward_one(&x), x.to_vec());
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        let mut r = rng(11);
        let mlp = Mlp::init(&[5, 7, 7, 4], Activation::LeakyRelu, &mut r);
        let mut xr = rng(12);
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| xr.gen_range(-2.0..2.0)).collect();
            let a = mlp.forward_one(&x);
            let b = naive_forward(&mlp, &x);
            let m = Matrix::from_rows(vec![x.clone()]);
            let c = mlp.forward_batch(&m);
            for o in 0..4 {
                assert!((a[o] - b[o]).abs() < 1e-12);
                assert!((c.get(0, o) - b[o]).abs() < 1e-12);
            }
        }
    }

    fn batch_loss(mlp: &Mlp, items: &[QTrainItem], loss: Loss) -> f64 {
        let mut total = 0.0;
        for it in items {
            let out = mlp.forward_one(&it.encoded);
            total += it.weight * loss.value(out[it.action] - it.target);
        }
        total / items.len() as f64
    }

    fn random_items(n: usize, input: usize, actions: usize, seed: u64) -> Vec<QTrainItem> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| QTrainItem {
                encoded: (0..input).map(|_| r.gen_range(-1.0..1.0)).collect(),
                mask: vec![true; actions],
                action: r.gen_range(0..actions),
                target: r.gen_range(-2.0..2.0),
                weight: r.gen_range(0.2..1.5),
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        for seed in 0..5u64 {
            for loss in [Loss::Mse, Loss::Huber(1.0)] {
                let mut r = rng(100 + seed);
                let mut mlp = Mlp::init(&[4, 6, 3], Activation::LeakyRelu, &mut r);
                let items = random_items(7, 4, 3, 200 + seed);
                let (grads, _, _) = q_loss_backward(&mlp, &items, loss).unwrap();
                let h = 1e-5;
                // probe every coordinate of every layer
                for l in 0..mlp.weights.len() {
                    for idx in 0..mlp.weights[l].data.len() {
                        let orig = mlp.weights[l].data[idx];
                        mlp.weights[l].data[idx] = orig + h;
                        let up = batch_loss(&mlp, &items, loss);
                        mlp.weights[l].data[idx] = orig - h;
                        let down = batch_loss(&mlp, &items, loss);
                        mlp.weights[l].data[idx] = orig;
                        let fd = (up - down) / (2.0 * h);
                        let g = grads.weights[l].data[idx];
                        let denom = g.abs().max(fd.abs()).max(1e-6);
                        assert!(
                            (g - fd).abs() / denom < 1e-4,
                            "layer {l} idx {idx}: grad {g} vs fd {fd}"
                        );
                    }
                    for idx in 0..mlp.biases[l].len() {
                        let orig = mlp.biases[l][idx];
                        mlp.biases[l][idx] = orig + h;
                        let up = batch_loss(&mlp, &items, loss);
                        mlp.biases[l][idx] = orig - h;
                        let down = batch_loss(&mlp, &items, loss);
                        mlp.biases[l][idx] = orig;
                        let fd = (up - down) / (2.0 * h);
                        let g = grads.biases[l][idx];
                        let denom = g.abs().max(fd.abs()).max(1e-6);
                        assert!((g - fd).abs() / denom < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_residual_means_zero_loss_and_gradient() {
        let mut r = rng(3);
        let mlp = Mlp::init(&[3, 5, 2], Activation::LeakyRelu, &mut r);
        let x = vec![0.5, -0.25, 1.0];
        let out = mlp.forward_one(&x);
        let items = vec![QTrainItem {
            encoded: x,
            mask: vec![true, true],
            action: 1,
            target: out[1],
            weight: 1.0,
        }];
        let (grads, loss, residuals) = q_loss_backward(&mlp, &items, Loss::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(residuals[0], 0.0);
        assert!(grads.iter_flat().all(|g| g == 0.0));
    }

    #[test]
    fn huber_value_matches_piecewise_formula() {
        let h = Loss::Huber(1.0);
        assert!((h.value(3.0) - 2.5).abs() < 1e-15);
        assert!((h.value(-3.0) - 2.5).abs() < 1e-15);
        assert!((h.value(0.5) - 0.125).abs() < 1e-15);
        assert_eq!(h.deriv(3.0), 1.0);
        assert_eq!(h.deriv(0.5), 0.5);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut r = rng(4);
        let mut mlp = Mlp::init(&[3, 4, 2], Activation::LeakyRelu, &mut r);
        let reference = mlp.clone();
        let mut adam = AdamState::new(&mlp, 1e-3);
        let grads = Gradients::zeros_like(&mlp);
        adam.step(&mut mlp, &grads);
        assert_eq!(mlp, reference);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut mlp = Mlp::zeros(&[2, 2], Activation::LeakyRelu);
        let mut adam = AdamState::new(&mlp, 1e-3);
        let mut grads = Gradients::zeros_like(&mlp);
        grads.weights[0].data.iter_mut().for_each(|g| *g = 1.0);
        grads.biases[0].iter_mut().for_each(|g| *g = 1.0);
        adam.step(&mut mlp, &grads);
        // bias-corrected mhat/sqrt(vhat) = 1, so each step is lr/(1+eps)
        for v in mlp.weights[0].data.iter().chain(mlp.biases[0].iter()) {
            assert!((v + 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_two_steps_match_scripted_trace() {
        let mut mlp = Mlp::zeros(&[1, 1], Activation::LeakyRelu);
        mlp.weights[0].set(0, 0, 0.7);
        let mut adam = AdamState::new(&mlp, 0.01);
        let gs = [0.3, -0.5];
        for &g in &gs {
            let mut grads = Gradients::zeros_like(&mlp);
            grads.weights[0].set(0, 0, g);
            adam.step(&mut mlp, &grads);
        }
        // independent two-step recomputation
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let mut p = 0.7;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1f64_pow(b1, t));
            let vhat = v / (1.0 - b1f64_pow(b2, t));
            p -= lr * mhat / (vhat.sqrt() + eps);
        }
        assert!((mlp.weights[0].get(0, 0) - p).abs() < 1e-12);
    }

    fn b1f64_pow(b: f64, t: i32) -> f64 {
        b.powi(t)
    }

    #[test]
    fn hard_update_makes_outputs_identical() {
        let mut r = rng(5);
        let online = Mlp::init(&[3, 8, 2], Activation::LeakyRelu, &mut r);
        let mut target = Mlp::init(&[3, 8, 2], Activation::LeakyRelu, &mut r);
        hard_update(&mut target, &online);
        let mut xr = rng(6);
        for _ in 0..3 {
            let x: Vec<f64> = (0..3).map(|_| xr.gen_range(-1.0..1.0)).collect();
            assert_eq!(online.forward_one(&x), target.forward_one(&x));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Mlp::init(&[4, 4, 2], Activation::LeakyRelu, &mut rng(9));
        let b = Mlp::init(&[4, 4, 2], Activation::LeakyRelu, &mut rng(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mlp_q_values_mask_invalid_actions() {
        let env = ChainEnv::new(2, 1.0);
        let mlp = Mlp::zeros(&[3, 1], Activation::LeakyRelu);
        let q = mlp.q_values(&env, &env.initial_state()).unwrap();
        assert_eq!(q, vec![0.0]);
    }

    #[test]
    fn tabular_rejects_empty_and_unknown() {
        assert!(matches!(
            TabularQ::new(2, Vec::<(EnvState, Vec<f64>)>::new()),
            Err(NnError::EmptyTable)
        ));
        let env = ChainEnv::new(2, 1.0);
        let s0 = env.initial_state();
        let tab = TabularQ::new(1, vec![(s0.clone(), vec![0.5])]).unwrap();
        assert_eq!(tab.q_values(&env, &s0).unwrap(), vec![0.5]);
        let other = EnvState::new(vec![1], false);
        assert!(matches!(tab.q_values(&env, &other), Err(NnError::UnknownState)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("gfn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        let mut r = rng(10);
        let net = Mlp::init(&[4, 6, 3], Activation::LeakyRelu, &mut r);
        let adam = AdamState::new(&net, 1e-3);
        let mut env_config = BTreeMap::new();
        env_config.insert("env".to_string(), "hypergrid".to_string());
        let ckpt = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            env_config,
            algo: "softdqn".into(),
            layer_sizes: net.sizes.clone(),
            activation: net.activation,
            net,
            adam,
            rng: RngState::capture(&r),
            iteration: 17,
        };
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.net, loaded.net, "net differs");
        assert_eq!(ckpt.adam, loaded.adam, "adam differs");
        assert_eq!(ckpt.rng, loaded.rng, "rng differs");
        assert_eq!(ckpt, loaded);
        // restored rng continues identically
        let mut a = ckpt.rng.restore();
        let mut b = r;
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        std::fs::remove_dir_all(&dir).ok();
    }
}
