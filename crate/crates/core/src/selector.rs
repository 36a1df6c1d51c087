//! Decision functions for selective prediction.
//!
//! Every score follows one convention: higher `keep_score` means keep. Distance
//! based scores are negated at construction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{abstention_score, ce_hard, ScoreSpec, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::estimator::{train_mlp, Aggregation, MlpConfig, MlpModel, Targets};
use crate::prob::ProbDist;

/// Where a keep score came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreSource {
    MaxProb,
    /// MaxProb on temperature-scaled probabilities.
    TemperatureScaled {
        temperature: f64,
    },
    /// Crowd-distance score; `aggregation` is `None` for a direct regressor.
    CrowdCalib {
        spec: ScoreSpec,
        aggregation: Option<Aggregation>,
    },
    Correctness,
    External,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreSource::MaxProb => f.write_str("maxprob"),
            ScoreSource::TemperatureScaled { temperature } => write!(f, "temperature:{temperature:?}"),
            ScoreSource::CrowdCalib { spec, aggregation } => {
                let agg = aggregation.map_or("direct", Aggregation::as_str);
                write!(f, "crowd_calib:{agg}:{spec}")
            }
            ScoreSource::Correctness => f.write_str("correctness"),
            ScoreSource::External => f.write_str("external"),
        }
    }
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown score source {s:?}"));
        match s {
            "maxprob" => return Ok(ScoreSource::MaxProb),
            "correctness" => return Ok(ScoreSource::Correctness),
            "external" => return Ok(ScoreSource::External),
            _ => {}
        }
        if let Some(t) = s.strip_prefix("temperature:") {
            let temperature: f64 = t.parse().map_err(|_| bad())?;
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(bad());
            }
            return Ok(ScoreSource::TemperatureScaled { temperature });
        }
        if let Some(rest) = s.strip_prefix("crowd_calib:") {
            let (agg, spec) = rest.split_once(':').ok_or_else(bad)?;
            let aggregation = match agg {
                "direct" => None,
                other => Some(other.parse()?),
            };
            return Ok(ScoreSource::CrowdCalib {
                spec: spec.parse()?,
                aggregation,
            });
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionScore {
    pub sample_id: String,
    pub keep_score: f64,
    pub source: ScoreSource,
}

impl DecisionScore {
    pub fn new(sample_id: impl Into<String>, keep_score: f64, source: ScoreSource) -> Result<Self> {
        let sample_id = sample_id.into();
        if !keep_score.is_finite() {
            return Err(Error::NonFiniteScore(sample_id));
        }
        Ok(Self {
            sample_id,
            keep_score,
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Predict(usize),
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub sample_id: String,
    pub action: Action,
}

pub fn maxprob_score(sample_id: impl Into<String>, base: &ProbDist) -> Result<DecisionScore> {
    DecisionScore::new(sample_id, base.max_prob(), ScoreSource::MaxProb)
}

/// Negated abstention score of the base distribution against the crowd.
pub fn crowd_calib_score(
    sample_id: impl Into<String>,
    spec: ScoreSpec,
    crowd: &ProbDist,
    base: &ProbDist,
) -> Result<DecisionScore> {
    let distance = abstention_score(spec, crowd, base)?;
    DecisionScore::new(
        sample_id,
        -distance,
        ScoreSource::CrowdCalib {
            spec,
            aggregation: None,
        },
    )
}

/// Predicts the base argmax iff `keep_score >= threshold`.
pub fn decide(score: &DecisionScore, threshold: f64, base: &ProbDist) -> Decision {
    let action = if score.keep_score >= threshold {
        Action::Predict(base.argmax())
    } else {
        Action::Abstain
    };
    Decision {
        sample_id: score.sample_id.clone(),
        action,
    }
}

/// Stand-in logits for a probability vector: `ln(max(p, 1e-12))`.
pub fn logits_from_probs(probs: &ProbDist) -> Vec<f64> {
    probs.iter().map(|p| p.max(LOG_CLAMP).ln()).collect()
}

pub fn scale_logits(logits: &[f64], temperature: f64) -> Result<ProbDist> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    ProbDist::softmax(&scaled)
}

/// Mean negative log-likelihood of `gold` under `softmax(logits / T)`.
pub fn temperature_nll(logits: &[Vec<f64>], gold: &[usize], temperature: f64) -> Result<f64> {
    let mut total = 0.0;
    for (z, &g) in logits.iter().zip(gold) {
        total += ce_hard(g, &scale_logits(z, temperature)?)?;
    }
    Ok(total / logits.len() as f64)
}

const LOG_T_RANGE: (f64, f64) = (-5.0, 5.0);
const GOLDEN_TOL: f64 = 1e-4;

/// Fits a softmax temperature by golden-section search over `ln T` in
/// `[-5, 5]`. The result never has a higher NLL than `T = 1`. When every
/// gold label is the same class the temperature is ill-defined and 1 is
/// returned with a warning.
pub fn fit_temperature(logits: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows but {} labels",
            logits.len(),
            gold.len()
        )));
    }
    let k = logits[0].len();
    for z in logits {
        if z.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: z.len(),
            });
        }
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= k) {
        return Err(Error::LabelOutOfRange {
            label: g,
            num_classes: k,
        });
    }
    if gold.len() > 1 && gold.iter().all(|&g| g == gold[0]) {
        log::warn!("{}; using temperature 1", Error::DegenerateLabels);
        return Ok(1.0);
    }

    let objective = |log_t: f64| temperature_nll(logits, gold, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c)?;
    let mut fd = objective(d)?;
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d)?;
        }
    }
    let log_t = 0.5 * (a + b);
    if objective(log_t)? <= objective(0.0)? {
        Ok(log_t.exp())
    } else {
        Ok(1.0)
    }
}

fn calibrator_input(features: &[f64], base: &ProbDist) -> Vec<f64> {
    features.iter().chain(base.iter()).copied().collect()
}

/// A binary classifier predicting whether the base model is correct, fed the
/// sample features concatenated with the base probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessCalibrator {
    pub model: MlpModel,
}

impl CorrectnessCalibrator {
    /// Probability that the base model is correct; used as the keep score.
    pub fn keep_probability(&self, features: &[f64], base: &ProbDist) -> Result<f64> {
        Ok(self.model.predict_dist(&calibrator_input(features, base))?[1])
    }

    pub fn score(&self, sample_id: impl Into<String>, features: &[f64], base: &ProbDist) -> Result<DecisionScore> {
        DecisionScore::new(
            sample_id,
            self.keep_probability(features, base)?,
            ScoreSource::Correctness,
        )
    }
}

pub fn fit_correctness_calibrator(
    features: &[Vec<f64>],
    base_probs: &[ProbDist],
    correct: &[bool],
    config: &MlpConfig,
) -> Result<CorrectnessCalibrator> {
    if features.len() != base_probs.len() || features.len() != correct.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows, {} probability rows, {} correctness flags",
            features.len(),
            base_probs.len(),
            correct.len()
        )));
    }
    let inputs: Vec<Vec<f64>> = features
        .iter()
        .zip(base_probs)
        .map(|(x, p)| calibrator_input(x, p))
        .collect();
    let labels: Vec<usize> = correct.iter().map(|&c| c as usize).collect();
    let config = MlpConfig {
        head: crate::estimator::Head::ClassifierSoftmax,
        ..config.clone()
    };
    let model = train_mlp(
        &inputs,
        Targets::Labels {
            labels: &labels,
            num_classes: 2,
        },
        &config,
    )?;
    Ok(CorrectnessCalibrator { model })
}
