//! Divergences, entropy, abstention scores and the soft/hard losses.
//!
//! All logarithms are natural. Wherever a distribution appears inside a
//! logarithm it is clamped from below to [`LOG_CLAMP`] (no renormalization),
//! so one-hot model outputs yield finite values.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::prob::ProbDist;

/// Lower clamp applied to probabilities inside a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Kl,
    Jsd,
    Tvd,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [DistanceMetric::Kl, DistanceMetric::Jsd, DistanceMetric::Tvd];

    /// Distance between `reference` and `other`. For KL the reference is the
    /// first argument: `KL(reference || other)`.
    pub fn distance(self, reference: &ProbDist, other: &ProbDist) -> Result<f64> {
        match self {
            DistanceMetric::Kl => kl_divergence(reference, other),
            DistanceMetric::Jsd => jsd(reference, other),
            DistanceMetric::Tvd => tvd(reference, other),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Kl => "kl",
            DistanceMetric::Jsd => "jsd",
            DistanceMetric::Tvd => "tvd",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(DistanceMetric::Kl),
            "jsd" => Ok(DistanceMetric::Jsd),
            "tvd" => Ok(DistanceMetric::Tvd),
            other => Err(Error::InvalidConfig(format!("unknown distance metric {other:?}"))),
        }
    }
}

/// A distance metric, optionally with the base distribution's entropy added
/// (the `+E` variants).
///
/// Textual form is `"jsd"`, `"jsd+e"`, `"KL+E"` and so on (case-insensitive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScoreSpec {
    pub metric: DistanceMetric,
    pub add_entropy: bool,
}

impl ScoreSpec {
    pub fn new(metric: DistanceMetric, add_entropy: bool) -> Self {
        Self { metric, add_entropy }
    }

    /// File-name friendly slug, e.g. `jsd_e`.
    pub fn slug(&self) -> String {
        if self.add_entropy {
            format!("{}_e", self.metric.as_str())
        } else {
            self.metric.as_str().to_string()
        }
    }
}

impl fmt::Display for ScoreSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.add_entropy {
            write!(f, "{}+E", self.metric)
        } else {
            write!(f, "{}", self.metric)
        }
    }
}

impl FromStr for ScoreSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.strip_suffix("+e") {
            Some(metric) => Ok(ScoreSpec::new(metric.parse()?, true)),
            None => Ok(ScoreSpec::new(lower.parse()?, false)),
        }
    }
}

impl TryFrom<String> for ScoreSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScoreSpec> for String {
    fn from(s: ScoreSpec) -> String {
        s.to_string()
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &ProbDist) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)`, with `0 ln(0/.) = 0` and `q`
/// clamped inside the log.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_dim(q)?;
    Ok(kl_raw(p, q))
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - clamped_ln(qi)))
        .sum()
}

/// Jensen-Shannon divergence, `½KL(p||m) + ½KL(q||m)` with `m = (p+q)/2`.
pub fn jsd(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_dim(q)?;
    let m: Vec<f64> = p.iter().zip(q.iter()).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_raw(p, &m) + 0.5 * kl_raw(q, &m))
}

/// Total variation distance, `½ sum_i |p_i - q_i|`.
pub fn tvd(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_dim(q)?;
    Ok(0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Distance of the base model's distribution from the crowd distribution,
/// plus `entropy(base)` for `+E` specs. Higher means farther from the crowd
/// or less certain. KL is taken as `KL(crowd || base)`.
pub fn abstention_score(spec: ScoreSpec, crowd: &ProbDist, base: &ProbDist) -> Result<f64> {
    let distance = spec.metric.distance(crowd, base)?;
    Ok(if spec.add_entropy {
        distance + entropy(base)
    } else {
        distance
    })
}

/// Soft cross-entropy `-sum_i target_i ln(pred_i)`.
pub fn ce_soft(target: &ProbDist, pred: &ProbDist) -> Result<f64> {
    target.check_same_dim(pred)?;
    Ok(-target
        .iter()
        .zip(pred.iter())
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * clamped_ln(p))
        .sum::<f64>())
}

/// Cross-entropy against a hard label.
pub fn ce_hard(label: usize, pred: &ProbDist) -> Result<f64> {
    let target = ProbDist::one_hot(pred.len(), label)?;
    ce_soft(&target, pred)
}

/// Mean over classes of squared differences.
pub fn mse_loss(target: &ProbDist, pred: &ProbDist) -> Result<f64> {
    target.check_same_dim(pred)?;
    let k = target.len() as f64;
    Ok(target
        .iter()
        .zip(pred.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / k)
}
