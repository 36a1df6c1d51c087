//! Annotation records, hard/soft label derivation, agreement classes, the
//! JSONL dataset format and deterministic splitting.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::entropy;
use crate::error::{Error, Result};
use crate::prob::ProbDist;

/// First line of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub num_classes: usize,
    #[serde(default)]
    pub feature_dim: Option<usize>,
}

/// A single label given by one annotator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotator_id: String,
    pub label: usize,
}

/// One item of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<Annotation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_counts: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_probs: Option<ProbDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_logits: Option<Vec<f64>>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: None,
            features: None,
            annotations: None,
            vote_counts: None,
            gold: None,
            base_probs: None,
            base_logits: None,
        }
    }

    /// Checks every record invariant against the dataset header.
    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        let k = header.num_classes;
        let label_check = |label: usize| {
            if label >= k {
                Err(Error::LabelOutOfRange { label, num_classes: k })
            } else {
                Ok(())
            }
        };
        if let Some(annotations) = &self.annotations {
            for a in annotations {
                label_check(a.label)?;
            }
        }
        if let Some(gold) = self.gold {
            label_check(gold)?;
        }
        if let Some(counts) = &self.vote_counts {
            check_len("vote_counts", counts.len(), k)?;
        }
        if let (Some(counts), Some(_)) = (&self.vote_counts, &self.annotations) {
            let tally = self.tally_annotations(k).expect("annotations present");
            if counts != &tally {
                return Err(Error::VoteMismatch {
                    id: self.id.clone(),
                    counts: counts.clone(),
                    tally,
                });
            }
        }
        if let Some(probs) = &self.base_probs {
            check_len("base_probs", probs.len(), k)?;
        }
        if let Some(logits) = &self.base_logits {
            check_len("base_logits", logits.len(), k)?;
            if logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::InvalidDistribution(format!(
                    "record {}: non-finite base_logits",
                    self.id
                )));
            }
        }
        if let (Some(features), Some(d)) = (&self.features, header.feature_dim) {
            check_len("features", features.len(), d)?;
        }
        if let Some(features) = &self.features {
            if features.iter().any(|x| !x.is_finite()) {
                return Err(Error::ShapeMismatch(format!(
                    "record {}: non-finite feature value",
                    self.id
                )));
            }
        }
        Ok(())
    }

    fn tally_annotations(&self, num_classes: usize) -> Option<Vec<u64>> {
        self.annotations.as_ref().map(|annotations| {
            let mut tally = vec![0u64; num_classes];
            for a in annotations {
                if a.label < num_classes {
                    tally[a.label] += 1;
                }
            }
            tally
        })
    }

    /// Per-class vote counts, from `vote_counts` or by tallying `annotations`.
    pub fn counts(&self, num_classes: usize) -> Result<Vec<u64>> {
        let counts = match (&self.vote_counts, self.tally_annotations(num_classes)) {
            (Some(counts), _) => counts.clone(),
            (None, Some(tally)) => tally,
            (None, None) => return Err(Error::NoAnnotations(Some(self.id.clone()))),
        };
        if counts.iter().sum::<u64>() == 0 {
            return Err(Error::NoAnnotations(Some(self.id.clone())));
        }
        Ok(counts)
    }

    pub fn majority_vote(&self, num_classes: usize) -> Result<MajorityVote> {
        majority_vote(&self.counts(num_classes)?).map_err(|e| with_id(e, &self.id))
    }

    pub fn soft_label(&self, num_classes: usize, method: SoftLabelMethod) -> Result<ProbDist> {
        soft_label(&self.counts(num_classes)?, method)
    }

    pub fn agreement_class(&self, num_classes: usize) -> Result<AgreementClass> {
        agreement_class(&self.counts(num_classes)?).map_err(|e| with_id(e, &self.id))
    }

    /// The evaluation label: `gold` when present, else the majority vote.
    pub fn gold_label(&self, num_classes: usize) -> Result<usize> {
        match self.gold {
            Some(g) => Ok(g),
            None => Ok(self.majority_vote(num_classes)?.label),
        }
    }
}

fn check_len(field: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::ShapeMismatch(format!(
            "{field} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

fn with_id(e: Error, id: &str) -> Error {
    match e {
        Error::NoAnnotations(None) => Error::NoAnnotations(Some(id.to_string())),
        Error::SingleAnnotator(None) => Error::SingleAnnotator(Some(id.to_string())),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorityVote {
    pub label: usize,
    /// The maximum count is shared by two or more classes.
    pub tied: bool,
}

/// Argmax of the vote counts; ties go to the lowest class index and are flagged.
pub fn majority_vote(counts: &[u64]) -> Result<MajorityVote> {
    if counts.iter().sum::<u64>() == 0 {
        return Err(Error::NoAnnotations(None));
    }
    let max = *counts.iter().max().expect("non-empty");
    let label = counts.iter().position(|&c| c == max).expect("max exists");
    let tied = counts.iter().filter(|&&c| c == max).count() > 1;
    Ok(MajorityVote { label, tied })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelMethod {
    /// Softmax over the raw vote counts.
    #[default]
    Softmax,
    /// Each count divided by the total.
    Normalize,
}

impl std::str::FromStr for SoftLabelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "normalize" => Ok(Self::Normalize),
            other => Err(Error::InvalidConfig(format!("unknown soft-label method {other:?}"))),
        }
    }
}

pub fn soft_label(counts: &[u64], method: SoftLabelMethod) -> Result<ProbDist> {
    if counts.iter().sum::<u64>() == 0 {
        return Err(Error::NoAnnotations(None));
    }
    let as_real: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    match method {
        SoftLabelMethod::Softmax => ProbDist::softmax(&as_real),
        SoftLabelMethod::Normalize => ProbDist::from_weights(&as_real),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementClass {
    PerfectAgreement,
    Disagreement,
}

/// Perfect agreement iff exactly one class holds every vote. Needs at least
/// two votes.
pub fn agreement_class(counts: &[u64]) -> Result<AgreementClass> {
    match counts.iter().sum::<u64>() {
        0 => Err(Error::NoAnnotations(None)),
        1 => Err(Error::SingleAnnotator(None)),
        _ if counts.iter().filter(|&&c| c > 0).count() == 1 => Ok(AgreementClass::PerfectAgreement),
        _ => Ok(AgreementClass::Disagreement),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    /// Records with at least two votes.
    pub n: usize,
    pub n_perfect: usize,
    pub n_disagreement: usize,
    /// Records skipped because they carry fewer than two votes.
    pub n_excluded: usize,
    /// Mean entropy (nats) of the normalized vote distributions of the `n`
    /// counted records.
    pub mean_vote_entropy: f64,
}

pub fn agreement_summary(records: &[SampleRecord], num_classes: usize) -> AgreementSummary {
    let mut summary = AgreementSummary {
        n: 0,
        n_perfect: 0,
        n_disagreement: 0,
        n_excluded: 0,
        mean_vote_entropy: 0.0,
    };
    let mut entropy_sum = 0.0;
    for record in records {
        let Ok(counts) = record.counts(num_classes) else {
            summary.n_excluded += 1;
            continue;
        };
        match agreement_class(&counts) {
            Ok(class) => {
                summary.n += 1;
                match class {
                    AgreementClass::PerfectAgreement => summary.n_perfect += 1,
                    AgreementClass::Disagreement => summary.n_disagreement += 1,
                }
                let dist = soft_label(&counts, SoftLabelMethod::Normalize).expect("non-zero counts");
                entropy_sum += entropy(&dist);
            }
            Err(_) => summary.n_excluded += 1,
        }
    }
    if summary.n > 0 {
        summary.mean_vote_entropy = entropy_sum / summary.n as f64;
    }
    summary
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let ratios = Self { train, val, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "split ratios must be positive, got {all:?}"
            )));
        }
        let total: f64 = all.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split ratios sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by a floor-allocated partition; the remainder of
/// the flooring goes to the training split.
pub fn split_dataset<T: Clone>(records: &[T], ratios: SplitRatios, seed: u64) -> Result<Split<T>> {
    ratios.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = records.len();
    // the epsilon keeps products such as 10 * 0.1 from flooring to 0
    let n_val = ((n as f64) * ratios.val + 1e-9).floor() as usize;
    let n_test = ((n as f64) * ratios.test + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// A header plus validated records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, records: Vec<SampleRecord>) -> Result<Self> {
        if header.num_classes == 0 {
            return Err(Error::MissingHeader("num_classes must be positive".into()));
        }
        for r in &records {
            r.validate(&header)?;
        }
        Ok(Self { header, records })
    }

    /// Parses a JSONL dataset: a header object followed by one record per
    /// line. Blank lines are skipped. Errors carry 1-based line numbers.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(Error::MissingHeader("file is empty".into())),
                Some((_, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let header: DatasetHeader =
                        serde_json::from_str(&line).map_err(|e| Error::MissingHeader(e.to_string()))?;
                    if header.num_classes == 0 {
                        return Err(Error::MissingHeader("num_classes must be positive".into()));
                    }
                    break header;
                }
            }
        };
        let mut records = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| Error::Malformed { line: idx + 1, message };
            let record: SampleRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            record.validate(&header).map_err(|e| malformed(e.to_string()))?;
            records.push(record);
        }
        Ok(Self { header, records })
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&self.header).expect("header serializes")
        )?;
        for r in &self.records {
            writeln!(writer, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Annotation counts per annotator, over all records.
    pub fn annotator_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            for a in r.annotations.iter().flatten() {
                *counts.entry(a.annotator_id.clone()).or_insert(0) += 1;
            }
        }
        counts
    }
}
