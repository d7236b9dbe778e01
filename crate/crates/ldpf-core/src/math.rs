//! Numeric primitives: cosine similarity, temperature softmax, and the
//! small vector types the rest of the crate is built on.
//!
//! All math runs in f64. Feature vectors are plain `Vec<f64>` wrapped in a
//! thin newtype; heavy loops work on slices.

use serde::{Deserialize, Serialize};

use crate::error::{LdpfError, Result};

/// Tolerance for unit-norm and simplex-sum invariants.
pub const NORM_TOL: f64 = 1e-6;

/// An embedding-space vector. Image features, text features, and fused
/// features all share one dimension D per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// True if the Euclidean norm is 1 within [`NORM_TOL`].
    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOL
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Nonnegative weights over the latent domains that sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    /// Validates: every entry >= 0 and the sum is 1 within [`NORM_TOL`].
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(LdpfError::EmptyInput("simplex weights".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LdpfError::InvalidScalar(
                "simplex weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(LdpfError::InvalidScalar(format!(
                "simplex weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    /// One-hot weights of length `n` with mass at `index`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(LdpfError::IndexOutOfRange(format!(
                "one-hot index {index} out of {n}"
            )));
        }
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Ok(Self(w))
    }

    /// Uniform weights 1/n.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(LdpfError::EmptyInput("simplex weights".into()));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest weight, ties broken to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// A positive softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(LdpfError::InvalidScalar(format!(
                "temperature must be positive and finite, got {tau}"
            )));
        }
        Ok(Self(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale `v` to unit norm. Errors on (near-)zero input.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n < 1e-12 || !n.is_finite() {
        return Err(LdpfError::DegenerateFeature);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Index of the largest value, ties broken to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity dot(a,b)/(|a||b|), clamped into [-1, 1].
///
/// Errors on dimension mismatch or a zero-norm argument.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LdpfError::DimensionMismatch(format!(
            "cosine arguments have dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(LdpfError::EmptyInput("cosine argument".into()));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return Err(LdpfError::DegenerateFeature);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax of `logits / tau`, computed with max-subtraction for stability.
pub fn temperature_softmax(logits: &[f64], tau: Temperature) -> Result<SimplexWeights> {
    if logits.is_empty() {
        return Err(LdpfError::EmptyInput("softmax logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(LdpfError::InvalidScalar(
            "softmax logits must be finite".into(),
        ));
    }
    let t = tau.get();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    SimplexWeights::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Mean cross-entropy of probability rows against integer labels, in nats.
///
/// Probabilities are floored at 1e-12 before the log so a confidently wrong
/// model yields a large finite loss instead of infinity.
pub fn mean_cross_entropy(probs: &[SimplexWeights], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(LdpfError::EmptyInput("cross-entropy batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(LdpfError::DimensionMismatch(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(LdpfError::IndexOutOfRange(format!(
                "label {y} out of {} classes",
                p.len()
            )));
        }
        total -= p.as_slice()[y].max(1e-12).ln();
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn cosine_identical_unit_vectors() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal_vectors() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_computed_diagonal() {
        // dot = 1, norms sqrt(2) and 1
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.7071).abs() < 1e-4, "got {c}");
    }

    #[test]
    fn cosine_is_symmetric() {
        let a = [0.3, -1.2, 0.7];
        let b = [2.0, 0.1, -0.4];
        assert_eq!(
            cosine_similarity(&a, &b).unwrap(),
            cosine_similarity(&b, &a).unwrap()
        );
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, LdpfError::DegenerateFeature));
    }

    #[test]
    fn cosine_rejects_dim_mismatch() {
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_symmetry_gives_uniform() {
        for t in [0.01, 1.0, 100.0] {
            let w = temperature_softmax(&[2.5, 2.5, 2.5], tau(t)).unwrap();
            for &x in w.as_slice() {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_hand_computed_two_logits() {
        // e/(e+1) = 0.731058..., 1/(e+1) = 0.268941...
        let w = temperature_softmax(&[1.0, 0.0], tau(1.0)).unwrap();
        assert!((w.as_slice()[0] - 0.7311).abs() < 1e-4);
        assert!((w.as_slice()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_low_temperature_approaches_argmax() {
        let w = temperature_softmax(&[1.0, 0.0], tau(0.01)).unwrap();
        assert!(w.as_slice()[0] > 0.999);
        assert_eq!(w.argmax(), 0);
    }

    #[test]
    fn softmax_rejects_non_finite_logits() {
        assert!(temperature_softmax(&[f64::NAN, 0.0], tau(1.0)).is_err());
        assert!(temperature_softmax(&[f64::INFINITY, 0.0], tau(1.0)).is_err());
    }

    #[test]
    fn temperature_rejects_nonpositive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn simplex_validation() {
        assert!(SimplexWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexWeights::new(vec![0.6, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![-0.1, 1.1]).is_err());
        assert!(SimplexWeights::new(vec![]).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let p = vec![SimplexWeights::uniform(5).unwrap(); 4];
        let ce = mean_cross_entropy(&p, &[0, 1, 2, 3]).unwrap();
        assert!((ce - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_batch() {
        assert!(mean_cross_entropy(&[], &[]).is_err());
    }
}
