//! File formats owned by the pipeline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crowd_calib::annotations::{AgreementClass, Dataset, SampleRecord, SoftLabelMethod};
use crowd_calib::evaluation::SweepCurve;
use crowd_calib::selector::ScoreSource;
use crowd_calib::ProbDist;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Dataset::read_jsonl(BufReader::new(file)).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    dataset.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// One line of a labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLine {
    pub id: String,
    pub hard_label: usize,
    pub tied: bool,
    pub soft_label: ProbDist,
    /// `None` for single-vote items, which have no agreement class.
    pub agreement: Option<AgreementClass>,
}

pub fn label_line(record: &SampleRecord, num_classes: usize, method: SoftLabelMethod) -> CliResult<LabelLine> {
    let vote = record.majority_vote(num_classes)?;
    let agreement = match record.agreement_class(num_classes) {
        Ok(a) => Some(a),
        Err(crowd_calib::Error::SingleAnnotator(_)) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(LabelLine {
        id: record.id.clone(),
        hard_label: vote.label,
        tied: vote.tied,
        soft_label: record.soft_label(num_classes, method)?,
        agreement,
    })
}

/// Derives labels for every record and writes them as JSONL. Nothing is
/// written if any record fails.
pub fn write_labels(path: &Path, dataset: &Dataset, method: SoftLabelMethod) -> CliResult<()> {
    let k = dataset.num_classes();
    let lines = dataset
        .records
        .iter()
        .map(|r| label_line(r, k, method).map_err(|e| e.context(format!("record {}", r.id))))
        .collect::<CliResult<Vec<_>>>()?;
    let mut w = BufWriter::new(File::create(path)?);
    for line in &lines {
        writeln!(w, "{}", serde_json::to_string(line)?)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub keep_score: f64,
    pub source: String,
    pub base_pred: Option<usize>,
    pub gold: Option<usize>,
}

impl ScoreRow {
    pub fn source(&self) -> CliResult<ScoreSource> {
        self.source
            .parse()
            .map_err(|e: crowd_calib::Error| CliError::Data(e.to_string()))
    }
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> CliResult<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<ScoreRow>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if let Some(bad) = rows.iter().find(|r| !r.keep_score.is_finite()) {
        return Err(CliError::Numeric(format!(
            "{}: non-finite keep_score for {}",
            path.display(),
            bad.sample_id
        )));
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_curve(path: &Path, curve: &SweepCurve) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "coverage", "accuracy", "brier"])?;
    for p in &curve.points {
        w.write_record([
            p.threshold.to_string(),
            p.coverage.to_string(),
            opt(p.accuracy),
            opt(p.brier),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Records of `dataset` must all carry `base_probs`.
pub fn base_probs(dataset: &Dataset) -> CliResult<Vec<ProbDist>> {
    dataset
        .records
        .iter()
        .map(|r| {
            r.base_probs
                .clone()
                .ok_or_else(|| CliError::Data(format!("record {} has no base_probs", r.id)))
        })
        .collect()
}

pub fn features(dataset: &Dataset) -> CliResult<Vec<Vec<f64>>> {
    dataset
        .records
        .iter()
        .map(|r| {
            r.features
                .clone()
                .ok_or_else(|| CliError::Data(format!("record {} has no features", r.id)))
        })
        .collect()
}

pub fn gold_labels(dataset: &Dataset) -> CliResult<Vec<usize>> {
    let k = dataset.num_classes();
    dataset
        .records
        .iter()
        .map(|r| {
            r.gold_label(k)
                .map_err(|e| CliError::from(e).context(format!("record {} has no gold label", r.id)))
        })
        .collect()
}
