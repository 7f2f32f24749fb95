//! Dense vector primitives, probability vectors and the losses built on them.

use std::ops::Deref;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, CegError, Result};
use crate::scalar::Scalar;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-12;

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVec<S>(Vec<S>);

impl<S: Scalar> ProbVec<S> {
    /// Wraps `values` after checking they form a distribution (within 1e-6).
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(CegError::Parameter("probability vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < S::zero() || *v > S::one()) {
            return Err(CegError::NumericInput(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        let total: S = values.iter().copied().sum();
        if (total - S::one()).abs() > S::lit(1e-6) {
            return Err(CegError::NumericInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(CegError::Parameter(format!(
                "one-hot index {index} out of range for length {len}"
            )));
        }
        let mut values = vec![S::zero(); len];
        values[index] = S::one();
        Ok(Self(values))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(CegError::Parameter("probability vector is empty".into()));
        }
        Ok(Self(vec![S::one() / S::from_count(len); len]))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }

    /// Largest probability.
    pub fn max(&self) -> S {
        self.0.iter().copied().fold(S::zero(), S::max)
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl<S> Deref for ProbVec<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.0
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

pub fn squared_euclidean<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x - *y;
            d * d
        })
        .sum()
}

/// Index of the maximum entry; the lowest index wins ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-shifted).
pub fn softmax<S: Scalar>(logits: &[S]) -> Result<ProbVec<S>> {
    if logits.is_empty() {
        return Err(CegError::Parameter("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CegError::NumericInput("softmax logits".into()));
    }
    let shift = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = logits.iter().map(|z| (*z - shift).exp()).collect();
    let total: S = out.iter().copied().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(ProbVec(out))
}

/// Cross-entropy `-Σ target_h · ln(pred_h)` against a (possibly soft) target.
pub fn cross_entropy<S: Scalar>(pred: &[S], target: &[S]) -> Result<S> {
    ensure_len("cross-entropy", pred.len(), target.len())?;
    let eps = S::lit(PROB_EPSILON);
    let loss: S = pred
        .iter()
        .zip(target)
        .filter(|(_, t)| **t != S::zero())
        .map(|(p, t)| -*t * p.max(eps).min(S::one()).ln())
        .sum();
    // the clamp can leave a -0.0 or a tiny negative for exact one-hot matches
    Ok(loss.max(S::zero()))
}

/// Shannon entropy in nats.
pub fn entropy<S: Scalar>(p: &[S]) -> S {
    let eps = S::lit(PROB_EPSILON);
    p.iter()
        .filter(|v| **v > S::zero())
        .map(|v| -*v * v.max(eps).ln())
        .sum()
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    ensure_len("cosine distance", a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == S::zero() || nb == S::zero() {
        return Err(CegError::DegenerateVector);
    }
    let cos = dot(a, b) / (na * nb);
    Ok((S::one() - cos).max(S::zero()).min(S::lit(2.0)))
}

/// Draws `λ ~ Beta(alpha, alpha)`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(CegError::Parameter(format!(
            "Beta shape must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| CegError::Parameter(e.to_string()))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}
