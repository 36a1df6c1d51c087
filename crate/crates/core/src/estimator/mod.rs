//! Crowd estimators: per-annotator classifier panels and direct
//! crowd-distribution regressors, plus the strategies that aggregate panel
//! predictions into a crowd distribution.

mod mlp;

pub use mlp::{
    project_to_simplex, train_mlp, train_mlp_with_history, Head, Layer, MlpConfig, MlpModel, Targets, TrainOutcome,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{soft_label, SampleRecord, SoftLabelMethod};
use crate::distributions::{abstention_score, entropy, DistanceMetric, ScoreSpec};
use crate::error::{Error, Result};
use crate::prob::ProbDist;

/// Annotators with strictly more than `min_count` annotations, most active
/// first (ties by id).
pub fn select_annotators(records: &[SampleRecord], min_count: usize) -> Vec<String> {
    let counts = annotator_counts(records);
    let mut selected: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c > min_count).collect();
    selected.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    selected.into_iter().map(|(id, _)| id).collect()
}

pub fn annotator_counts(records: &[SampleRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for a in records.iter().flat_map(|r| r.annotations.iter().flatten()) {
        *counts.entry(a.annotator_id.clone()).or_insert(0) += 1;
    }
    counts
}

fn features_of(record: &SampleRecord) -> Result<&Vec<f64>> {
    record
        .features
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch(format!("record {} has no features", record.id)))
}

/// Features and labels of the records one annotator labelled. Records the
/// annotator never saw are left out.
pub fn annotator_training_set(records: &[SampleRecord], annotator_id: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in records {
        for a in record.annotations.iter().flatten() {
            if a.annotator_id == annotator_id {
                xs.push(features_of(record)?.clone());
                ys.push(a.label);
            }
        }
    }
    Ok((xs, ys))
}

/// Features and soft-label targets for a direct crowd regressor.
pub fn direct_training_set(
    records: &[SampleRecord],
    num_classes: usize,
    method: SoftLabelMethod,
) -> Result<(Vec<Vec<f64>>, Vec<ProbDist>)> {
    let mut xs = Vec::with_capacity(records.len());
    let mut ys = Vec::with_capacity(records.len());
    for record in records {
        xs.push(features_of(record)?.clone());
        ys.push(record.soft_label(num_classes, method)?);
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMember {
    pub annotator_id: String,
    pub model: MlpModel,
}

/// Per-annotator classifiers, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorPanel {
    members: Vec<PanelMember>,
}

impl AnnotatorPanel {
    pub fn new(members: Vec<PanelMember>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyPanel);
        }
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert(m.annotator_id.as_str()) {
                return Err(Error::DuplicateAnnotator(m.annotator_id.clone()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[PanelMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Every member's predicted distribution for one feature vector.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<ProbDist>> {
        self.members.iter().map(|m| m.model.predict_dist(features)).collect()
    }
}

/// Trains one classifier per annotator on that annotator's own labels.
///
/// Members train in parallel; member `i` is seeded with `config.seed + i`, so
/// the result does not depend on scheduling.
pub fn train_panel(
    records: &[SampleRecord],
    annotator_ids: &[String],
    config: &MlpConfig,
    num_classes: usize,
) -> Result<AnnotatorPanel> {
    if annotator_ids.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let members = annotator_ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let (xs, ys) = annotator_training_set(records, id)?;
            if xs.is_empty() {
                return Err(Error::InvalidConfig(format!("annotator {id} has no training samples")));
            }
            let member_config = MlpConfig {
                head: Head::ClassifierSoftmax,
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            let model = train_mlp(
                &xs,
                Targets::Labels {
                    labels: &ys,
                    num_classes,
                },
                &member_config,
            )?;
            Ok(PanelMember {
                annotator_id: id.clone(),
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AnnotatorPanel::new(members)
}

/// How panel predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Softmax over the tally of members' argmax labels.
    LabelDist,
    /// Mean of members' predicted distributions.
    AvgConf,
    /// Voter-fraction weighted distance, see [`weighted_scoring`].
    Weighted,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::LabelDist => "label_dist",
            Aggregation::AvgConf => "avg_conf",
            Aggregation::Weighted => "weighted",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_dist" => Ok(Aggregation::LabelDist),
            "avg_conf" => Ok(Aggregation::AvgConf),
            "weighted" => Ok(Aggregation::Weighted),
            other => Err(Error::InvalidConfig(format!("unknown aggregation {other:?}"))),
        }
    }
}

fn check_panel(preds: &[ProbDist]) -> Result<usize> {
    let k = preds.first().ok_or(Error::EmptyPanel)?.len();
    for p in preds {
        if p.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: p.len(),
            });
        }
    }
    Ok(k)
}

pub fn aggregate_label_dist(panel_preds: &[ProbDist]) -> Result<ProbDist> {
    let k = check_panel(panel_preds)?;
    let mut counts = vec![0u64; k];
    for p in panel_preds {
        counts[p.argmax()] += 1;
    }
    soft_label(&counts, SoftLabelMethod::Softmax)
}

pub fn aggregate_avg_conf(panel_preds: &[ProbDist]) -> Result<ProbDist> {
    let k = check_panel(panel_preds)?;
    let mut mean = vec![0.0; k];
    for p in panel_preds {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    ProbDist::from_weights(&mean)
}

/// `WS = sum_c r_c * metric(mean of class-c voters' distributions, base)`,
/// where class-c voters are the members whose argmax is `c` and `r_c` is
/// their fraction of the panel. Classes nobody voted for contribute 0.
pub fn weighted_scoring(panel_preds: &[ProbDist], base: &ProbDist, metric: DistanceMetric) -> Result<f64> {
    let k = check_panel(panel_preds)?;
    if base.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: base.len(),
        });
    }
    let mut sums = vec![vec![0.0; k]; k];
    let mut voters = vec![0usize; k];
    for p in panel_preds {
        let c = p.argmax();
        voters[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    let panel_size = panel_preds.len() as f64;
    let mut total = 0.0;
    for (sum, &count) in sums.iter().zip(&voters) {
        if count == 0 {
            continue;
        }
        let mean = ProbDist::from_weights(sum)?;
        total += (count as f64 / panel_size) * metric.distance(&mean, base)?;
    }
    Ok(total)
}

/// A trained crowd estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum CrowdEstimator {
    Panel {
        panel: AnnotatorPanel,
        aggregation: Aggregation,
    },
    Direct(MlpModel),
}

/// What a crowd estimator produces for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum CrowdEstimate {
    /// An estimated crowd distribution.
    Distribution(ProbDist),
    /// Raw panel predictions, kept for Weighted Scoring, whose score cannot
    /// be expressed through a single aggregated distribution.
    PanelVotes(Vec<ProbDist>),
}

impl CrowdEstimate {
    /// Abstention score against the base model's distribution (higher means
    /// abstain). For panel votes this is the weighted score, with
    /// `entropy(base)` added once for `+E` specs.
    pub fn score(&self, spec: ScoreSpec, base: &ProbDist) -> Result<f64> {
        match self {
            CrowdEstimate::Distribution(crowd) => abstention_score(spec, crowd, base),
            CrowdEstimate::PanelVotes(preds) => {
                let ws = weighted_scoring(preds, base, spec.metric)?;
                Ok(if spec.add_entropy { ws + entropy(base) } else { ws })
            }
        }
    }
}

pub fn estimate_crowd(estimator: &CrowdEstimator, features: &[f64]) -> Result<CrowdEstimate> {
    match estimator {
        CrowdEstimator::Direct(model) => {
            if model.head() != Head::RegressorLinear {
                return Err(Error::InvalidConfig("direct mode needs a regressor model".into()));
            }
            Ok(CrowdEstimate::Distribution(model.predict_dist(features)?))
        }
        CrowdEstimator::Panel { panel, aggregation } => {
            let preds = panel.predict(features)?;
            Ok(match aggregation {
                Aggregation::LabelDist => CrowdEstimate::Distribution(aggregate_label_dist(&preds)?),
                Aggregation::AvgConf => CrowdEstimate::Distribution(aggregate_avg_conf(&preds)?),
                Aggregation::Weighted => CrowdEstimate::PanelVotes(preds),
            })
        }
    }
}
