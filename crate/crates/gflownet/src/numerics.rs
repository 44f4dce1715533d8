//! Shared numeric helpers: masked log-sum-exp / softmax, categorical sampling,
//! and deterministic seed derivation for per-component RNG streams.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Surrogate for -inf on masked-out actions. Applied after the forward pass;
/// masked entries never enter a logsumexp or softmax structurally.
pub const NEG_Q: f64 = -1e9;

/// Log-sum-exp over `values[i]` for the given indices, with max subtraction.
/// `valid` must be non-empty.
pub fn logsumexp_indexed(values: &[f64], valid: &[usize]) -> f64 {
    debug_assert!(!valid.is_empty());
    let mut max = f64::NEG_INFINITY;
    for &i in valid {
        if values[i] > max {
            max = values[i];
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &i in valid {
        sum += (values[i] - max).exp();
    }
    max + sum.ln()
}

/// Log-sum-exp over an entire slice (non-empty).
pub fn logsumexp(values: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax over `values[i]` for the given indices, written into a full-length
/// vector: invalid entries are exactly 0 and the valid ones sum to 1.
pub fn softmax_indexed(values: &[f64], valid: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    softmax_indexed_into(values, valid, &mut out);
    out
}

/// In-place variant of [`softmax_indexed`]; `out` must have `values.len()` slots.
pub fn softmax_indexed_into(values: &[f64], valid: &[usize], out: &mut [f64]) {
    debug_assert!(!valid.is_empty());
    out.iter_mut().for_each(|p| *p = 0.0);
    let lse = logsumexp_indexed(values, valid);
    let mut total = 0.0;
    for &i in valid {
        let p = (values[i] - lse).exp();
        out[i] = p;
        total += p;
    }
    // renormalize away the last ulps so probabilities sum to 1 exactly enough
    // for cumulative sampling
    for &i in valid {
        out[i] /= total;
    }
}

/// Softmax over a dense slice of finite values.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let idx: Vec<usize> = (0..values.len()).collect();
    softmax_indexed(values, &idx)
}

/// Sample an index from a categorical distribution given by `probs`
/// (non-negative, summing to ~1). Zero-probability entries are never chosen.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_nonzero = i;
            if u < cum {
                return i;
            }
        }
    }
    last_nonzero
}

/// FNV-1a over a byte string; used for stable label hashing.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates derived seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a component label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label.as_bytes()))
}

/// Derive a child seed further indexed by a counter (worker chunks, eval points).
pub fn derive_seed_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, label) ^ splitmix64(index))
}

/// Deterministic RNG stream for one component of a run.
pub fn seeded_rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Deterministic RNG stream for one indexed chunk of a component.
pub fn seeded_rng_indexed(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(master, label, index))
}
