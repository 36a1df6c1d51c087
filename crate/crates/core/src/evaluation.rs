//! Threshold sweeps and selective-prediction metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distributions::{ce_soft, jsd, tvd};
use crate::error::{Error, Result};
use crate::prob::ProbDist;
use crate::selector::DecisionScore;

/// One threshold of a sweep. `accuracy` and `brier` are undefined when
/// nothing is kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub coverage: f64,
    pub accuracy: Option<f64>,
    pub brier: Option<f64>,
}

/// Sweep points ordered by strictly decreasing threshold, ending with a
/// keep-everything point at threshold `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

fn check_aligned(lens: &[usize]) -> Result<usize> {
    let n = lens[0];
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = lens.iter().find(|&&l| l != n) {
        return Err(Error::ShapeMismatch(format!("inputs have lengths {n} and {bad}")));
    }
    Ok(n)
}

/// Sweeps every distinct keep score as a threshold (keeping samples with
/// `keep_score >= threshold`). Brier scores use `probs` against `gold`.
pub fn sweep(scores: &[DecisionScore], correct: &[bool], probs: &[ProbDist], gold: &[usize]) -> Result<SweepCurve> {
    check_aligned(&[scores.len(), correct.len(), probs.len(), gold.len()])?;
    let keep: Vec<f64> = scores.iter().map(|s| s.keep_score).collect();
    let briers = probs
        .iter()
        .zip(gold)
        .map(|(p, &g)| brier(p, g))
        .collect::<Result<Vec<_>>>()?;
    sweep_values(&keep, correct, &briers)
}

/// [`sweep`] over raw keep scores and precomputed per-sample Brier scores.
pub fn sweep_values(keep: &[f64], correct: &[bool], briers: &[f64]) -> Result<SweepCurve> {
    let n = check_aligned(&[keep.len(), correct.len(), briers.len()])?;
    if let Some(bad) = keep.iter().find(|k| !k.is_finite()) {
        return Err(Error::NonFiniteScore(bad.to_string()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keep[b].total_cmp(&keep[a]));

    let total = n as f64;
    let mut points = Vec::new();
    let (mut kept, mut hits, mut brier_sum) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < n {
        let threshold = keep[order[i]];
        while i < n && keep[order[i]] == threshold {
            kept += 1;
            hits += correct[order[i]] as usize;
            brier_sum += briers[order[i]];
            i += 1;
        }
        points.push(SweepPoint {
            threshold,
            coverage: kept as f64 / total,
            accuracy: Some(hits as f64 / kept as f64),
            brier: Some(brier_sum / kept as f64),
        });
    }
    let last = *points.last().expect("n >= 1");
    points.push(SweepPoint {
        threshold: f64::NEG_INFINITY,
        ..last
    });
    Ok(SweepCurve { points })
}

/// Largest swept coverage whose accuracy reaches `target`; `None` when no
/// threshold qualifies.
pub fn cov_at_acc(curve: &SweepCurve, target: f64) -> Option<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.accuracy.is_some_and(|a| a >= target))
        .map(|p| p.coverage)
        .fold(None, |best, c| Some(best.map_or(c, |b: f64| b.max(c))))
}

/// Trapezoidal area of `value` over coverage from the first kept point to
/// coverage 1, divided by the covered span. A curve with a single coverage
/// value returns that point's value.
fn normalized_area(curve: &SweepCurve, value: impl Fn(&SweepPoint) -> Option<f64>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter(|p| p.coverage > 0.0)
        .filter_map(|p| value(p).map(|v| (p.coverage, v)))
        .collect();
    let (first, last) = (pts.first()?, pts.last()?);
    let span = last.0 - first.0;
    if span <= 0.0 {
        return Some(first.1);
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Some(area / span)
}

/// Mean accuracy along the accuracy-coverage curve (higher is better).
pub fn auc_accuracy_coverage(curve: &SweepCurve) -> f64 {
    normalized_area(curve, |p| p.accuracy).unwrap_or(0.0)
}

/// Mean Brier score along the coverage-Brier curve (lower is better).
pub fn aubs(curve: &SweepCurve) -> f64 {
    normalized_area(curve, |p| p.brier).unwrap_or(0.0)
}

/// Probability that a random correct sample outscores a random incorrect one,
/// ties counted one half. `None` when either group is empty.
pub fn auroc(scores: &[DecisionScore], correct: &[bool]) -> Result<Option<f64>> {
    let keep: Vec<f64> = scores.iter().map(|s| s.keep_score).collect();
    auroc_values(&keep, correct)
}

pub fn auroc_values(keep: &[f64], correct: &[bool]) -> Result<Option<f64>> {
    let n = check_aligned(&[keep.len(), correct.len()])?;
    let n_pos = correct.iter().filter(|&&c| c).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    // rank-sum with mid-ranks for ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keep[a].total_cmp(&keep[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && keep[order[j + 1]] == keep[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid_rank * order[i..=j].iter().filter(|&&k| correct[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(Some(u / (p * q)))
}

/// Multiclass Brier score: `sum_i (p_i - onehot(gold)_i)^2 / K`.
pub fn brier(prob: &ProbDist, gold: usize) -> Result<f64> {
    let k = prob.len();
    if gold >= k {
        return Err(Error::LabelOutOfRange {
            label: gold,
            num_classes: k,
        });
    }
    let sq: f64 = prob
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = if i == gold { 1.0 } else { 0.0 };
            (p - t).powi(2)
        })
        .sum();
    Ok(sq / k as f64)
}

/// Bin index for a confidence in `[0, 1]` with right-inclusive equal-width
/// bins `(b/n, (b+1)/n]`; confidence 0 falls in the first bin.
fn bin_of(conf: f64, n_bins: usize) -> usize {
    let n = n_bins as f64;
    let mut b = ((conf * n).ceil() as usize).saturating_sub(1).min(n_bins - 1);
    while b > 0 && conf <= b as f64 / n {
        b -= 1;
    }
    while b + 1 < n_bins && conf > (b + 1) as f64 / n {
        b += 1;
    }
    b
}

/// Expected calibration error of max-probability confidences.
pub fn ece(probs: &[ProbDist], gold: &[usize], n_bins: usize) -> Result<f64> {
    check_aligned(&[probs.len(), gold.len()])?;
    let conf: Vec<f64> = probs.iter().map(|p| p.max_prob()).collect();
    let correct: Vec<bool> = probs.iter().zip(gold).map(|(p, &g)| p.argmax() == g).collect();
    ece_from_confidences(&conf, &correct, n_bins)
}

pub fn ece_from_confidences(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    let n = check_aligned(&[confidences.len(), correct.len()])?;
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be at least 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_of(c.clamp(0.0, 1.0), n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let total = n as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / total) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Unweighted mean of per-class F1 over `num_classes` classes. A class
/// absent from both predictions and gold scores 0.
pub fn macro_f1(preds: &[usize], gold: &[usize], num_classes: usize) -> Result<f64> {
    check_aligned(&[preds.len(), gold.len()])?;
    if num_classes == 0 {
        return Err(Error::InvalidConfig("num_classes must be positive".into()));
    }
    if let Some(&bad) = preds.iter().chain(gold).find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            log::debug!("class {c} absent from predictions and gold; F1 counted as 0");
            continue;
        }
        total += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok(total / num_classes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftMetrics {
    pub mean_jsd: f64,
    pub mean_tvd: f64,
    pub mean_ce_soft: f64,
}

/// Mean JSD, TVD and soft cross-entropy between predicted distributions and
/// soft labels. Cross-entropy takes the soft label as target.
pub fn soft_metrics(pred_dists: &[ProbDist], soft_labels: &[ProbDist]) -> Result<SoftMetrics> {
    let n = check_aligned(&[pred_dists.len(), soft_labels.len()])? as f64;
    let mut out = SoftMetrics {
        mean_jsd: 0.0,
        mean_tvd: 0.0,
        mean_ce_soft: 0.0,
    };
    for (p, s) in pred_dists.iter().zip(soft_labels) {
        out.mean_jsd += jsd(p, s)?;
        out.mean_tvd += tvd(p, s)?;
        out.mean_ce_soft += ce_soft(s, p)?;
    }
    out.mean_jsd /= n;
    out.mean_tvd /= n;
    out.mean_ce_soft /= n;
    Ok(out)
}

/// Formats a Cov@Acc target as a report key, e.g. `0.90`.
pub fn target_key(target: f64) -> String {
    format!("{target:.2}")
}

/// Every metric for one scoring method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub auc: f64,
    pub auroc: Option<f64>,
    pub aubs: f64,
    pub ece: f64,
    pub brier: f64,
    pub macro_f1: f64,
    pub cov_at_acc: BTreeMap<String, Option<f64>>,
    pub soft: Option<SoftMetrics>,
}

/// Inputs for [`evaluate_method`], aligned by sample.
pub struct MethodInputs<'a> {
    pub method: &'a str,
    pub keep_scores: &'a [f64],
    /// Probabilities used for Brier, ECE and predictions.
    pub probs: &'a [ProbDist],
    pub gold: &'a [usize],
    pub soft_labels: Option<&'a [ProbDist]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodEvaluation {
    pub report: EvalReport,
    pub curve: SweepCurve,
}

pub fn evaluate_method(inputs: &MethodInputs<'_>, targets: &[f64], ece_bins: usize) -> Result<MethodEvaluation> {
    let n = check_aligned(&[inputs.keep_scores.len(), inputs.probs.len(), inputs.gold.len()])?;
    let k = inputs.probs[0].len();
    let preds: Vec<usize> = inputs.probs.iter().map(|p| p.argmax()).collect();
    let correct: Vec<bool> = preds.iter().zip(inputs.gold).map(|(p, g)| p == g).collect();
    let briers = inputs
        .probs
        .iter()
        .zip(inputs.gold)
        .map(|(p, &g)| brier(p, g))
        .collect::<Result<Vec<_>>>()?;
    let curve = sweep_values(inputs.keep_scores, &correct, &briers)?;
    let cov = targets
        .iter()
        .map(|&t| (target_key(t), cov_at_acc(&curve, t)))
        .collect();
    let soft = match inputs.soft_labels {
        Some(labels) => Some(soft_metrics(inputs.probs, labels)?),
        None => None,
    };
    let report = EvalReport {
        method: inputs.method.to_string(),
        auc: auc_accuracy_coverage(&curve),
        auroc: auroc_values(inputs.keep_scores, &correct)?,
        aubs: aubs(&curve),
        ece: ece(inputs.probs, inputs.gold, ece_bins)?,
        brier: briers.iter().sum::<f64>() / n as f64,
        macro_f1: macro_f1(&preds, inputs.gold, k)?,
        cov_at_acc: cov,
        soft,
    };
    Ok(MethodEvaluation { report, curve })
}
