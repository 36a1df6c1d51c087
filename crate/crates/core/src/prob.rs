//! Probability vectors over a fixed number of classes.

use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};

/// Accepted deviation of an input vector's sum from 1 before renormalization.
pub const INPUT_SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector over `K` classes.
///
/// Entries are in `[0, 1]` and sum to 1 (within floating-point rounding of
/// a single normalization pass). Serializes as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates an explicit probability vector and renormalizes it.
    ///
    /// Accepts vectors whose sum is within [`INPUT_SUM_TOLERANCE`] of 1 and
    /// whose entries are non-negative and finite.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if let Some(bad) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0 + INPUT_SUM_TOLERANCE)
        {
            return Err(Error::InvalidDistribution(format!("entry {bad} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > INPUT_SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self::normalized(probs, total))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights {weights:?} must be finite and non-negative"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Self::normalized(weights.to_vec(), total))
    }

    /// Numerically stable softmax.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidDistribution(format!("non-finite logits {logits:?}")));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(Self::normalized(exps, total))
    }

    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes > 0, "uniform distribution needs at least one class");
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(num_classes: usize, label: usize) -> Result<Self> {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        let mut v = vec![0.0; num_classes];
        v[label] = 1.0;
        Ok(Self(v))
    }

    fn normalized(mut v: Vec<f64>, total: f64) -> Self {
        for p in v.iter_mut() {
            *p = (*p / total).min(1.0);
        }
        Self(v)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max_prob(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn check_same_dim(&self, other: &ProbDist) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }
}

/// Index of the maximum value; ties resolved to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Deref for ProbDist {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ProbDist {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(p: ProbDist) -> Vec<f64> {
        p.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renormalizes_within_tolerance() {
        let p = ProbDist::new(vec![0.5000004, 0.5]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert!(ProbDist::new(vec![0.6, 0.6]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::new(vec![f64::NAN, 1.0]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
        assert!(ProbDist::from_weights(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(ProbDist::uniform(3).argmax(), 0);
        assert_eq!(ProbDist::new(vec![0.2, 0.4, 0.4]).unwrap().argmax(), 1);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = ProbDist::softmax(&[1.0, 2.0, 3.0]).unwrap();
        let b = ProbDist::softmax(&[1001.0, 1002.0, 1003.0]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn json_is_a_bare_array() {
        let p = ProbDist::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(serde_json::to_string(&p).unwrap(), "[0.25,0.75]");
        let back: ProbDist = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<ProbDist>("[0.5,0.7]").is_err());
    }
}
