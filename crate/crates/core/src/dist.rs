//! Exact categorical-distribution arithmetic: softmax, divergences, entropy,
//! sampling, comparison.
//!
//! All logarithms are natural logs. Divergences return an explicit
//! [`Divergence`] marker instead of letting `f64::INFINITY` leak into
//! arithmetic: support violations stay loud and callers must branch.

use crate::error::{Error, Result};
use rand::Rng;

/// Tolerance for "sums to one" checks on probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A probability vector over `V >= 2` categories.
///
/// Entries are non-negative and sum to one within [`PROB_SUM_TOL`]. Values are
/// immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid(format!(
                "categorical needs at least 2 categories, got {}",
                probs.len()
            )));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::invalid(format!("probability [{i}] = {p} out of range")));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Categorical { probs })
    }

    /// Skips validation; for internal construction of values that are valid by
    /// arithmetic (softmax outputs, renormalized positives).
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL);
        Categorical { probs }
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Categorical::new(vec![1.0 / len as f64; len.max(1)])
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::invalid(format!("one-hot index {index} out of range {len}")));
        }
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Categorical::new(probs)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// A vector of real-valued logits (finite entries, length >= 2).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    logits: Vec<f64>,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::invalid(format!(
                "logit vector needs at least 2 entries, got {}",
                logits.len()
            )));
        }
        for (i, &x) in logits.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::invalid(format!("logit [{i}] = {x} is not finite")));
            }
        }
        Ok(LogitVector { logits })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }
}

/// Result of a divergence computation.
///
/// `Infinite` marks mass in the numerator where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Divergence::Infinite)
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            Divergence::Finite(v) => Some(*v),
            Divergence::Infinite => None,
        }
    }

    /// Unwraps the finite value; panics with `ctx` on the infinite marker.
    /// Use only where full support is guaranteed by construction.
    pub fn expect_finite(&self, ctx: &str) -> f64 {
        match self {
            Divergence::Finite(v) => *v,
            Divergence::Infinite => panic!("infinite divergence: {ctx}"),
        }
    }
}

/// KL direction following the convention where `q` is the target:
/// `Forward` is D(q || p), `Reverse` is D(p || q).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KlDirection {
    Forward,
    Reverse,
}

/// Softmax with max-subtraction; strictly positive output summing to one.
pub fn softmax(f: &LogitVector) -> Categorical {
    Categorical::from_normalized(softmax_slice(f.as_slice()))
}

/// Slice-level softmax for hot paths. Input entries must be finite.
pub fn softmax_slice(f: &[f64]) -> Vec<f64> {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = f.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

/// Log-softmax (max-subtracted); pairs with [`softmax_slice`].
pub fn log_softmax_slice(f: &[f64]) -> Vec<f64> {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = f.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    f.iter().map(|&x| x - max - log_sum).collect()
}

/// Sum of `a_i ln(a_i / b_i)` with `0 ln 0 := 0`; infinite marker when `a` has
/// mass where `b` is zero. Both slices must already have equal length.
pub fn relative_entropy_slices(a: &[f64], b: &[f64]) -> Divergence {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for (&ai, &bi) in a.iter().zip(b.iter()) {
        if ai == 0.0 {
            continue;
        }
        if bi == 0.0 {
            return Divergence::Infinite;
        }
        total += ai * (ai / bi).ln();
    }
    Divergence::Finite(total)
}

/// KL divergence between `p` and `q` in the given direction.
pub fn kl(p: &Categorical, q: &Categorical, direction: KlDirection) -> Result<Divergence> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    Ok(match direction {
        KlDirection::Forward => relative_entropy_slices(q.probs(), p.probs()),
        KlDirection::Reverse => relative_entropy_slices(p.probs(), q.probs()),
    })
}

/// Shannon entropy, `-sum p ln p` with `0 ln 0 := 0`.
pub fn entropy(p: &Categorical) -> f64 {
    entropy_slice(p.probs())
}

pub fn entropy_slice(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Inverse-CDF categorical sampling. Identical seed and call sequence give
/// identical tokens.
pub fn sample<R: Rng>(p: &Categorical, rng: &mut R) -> usize {
    sample_slice(p.probs(), rng)
}

pub fn sample_slice<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
            cum += pi;
            if u < cum {
                return i;
            }
        }
    }
    // u landed in the rounding slack past the last positive entry
    last_positive
}

/// Total variation distance, `0.5 * sum |p_i - q_i|`, in [0, 1].
pub fn total_variation(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    Ok(total_variation_slices(p.probs(), q.probs()))
}

pub fn total_variation_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q.iter()).map(|(&a, &b)| (a - b).abs()).sum::<f64>()
}
