//! Seeded synthetic crowds for tests, demos and the bundled fixtures.
//!
//! Each item has a dominant class and is either an agreement item (the crowd
//! puts almost all mass on the dominant class) or a disagreement item (the
//! crowd splits between two classes). Feature vectors are Gaussian around a
//! class centre, shifted by a fixed offset on disagreement items, so a crowd
//! estimator can learn both the class and the disagreement region.
//!
//! The synthetic base model is accurate and fairly confident on agreement
//! items, less confident when it is wrong there, and overconfident on
//! disagreement items, where it picks either of the two contested classes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::annotations::{majority_vote, Annotation, Dataset, DatasetHeader, SampleRecord};
use crate::error::{Error, Result};
use crate::prob::ProbDist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub disagreement_fraction: f64,
    pub n_annotators: usize,
    pub annotations_per_item: usize,
    /// Emit per-annotator `annotations` (true) or only `vote_counts`.
    pub emit_annotations: bool,
    /// Probability that the base model picks the dominant class on an
    /// agreement item.
    pub base_accuracy: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 500,
            num_classes: 2,
            feature_dim: 8,
            disagreement_fraction: 0.3,
            n_annotators: 3,
            annotations_per_item: 3,
            emit_annotations: true,
            base_accuracy: 0.9,
            feature_noise: 0.6,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n == 0 {
            return fail("n must be positive");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.disagreement_fraction) || !(0.0..=1.0).contains(&self.base_accuracy) {
            return fail("fractions must lie in [0, 1]");
        }
        if self.annotations_per_item == 0 || self.annotations_per_item > self.n_annotators {
            return fail("annotations_per_item must be in 1..=n_annotators");
        }
        if self.feature_noise.is_nan() || self.feature_noise < 0.0 {
            return fail("feature_noise must be non-negative");
        }
        Ok(())
    }
}

/// Ground truth kept alongside a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTruth {
    pub dominant_class: usize,
    pub disagreement: bool,
    pub crowd: ProbDist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub dataset: Dataset,
    pub truth: Vec<ItemTruth>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sample_class(rng: &mut ChaCha8Rng, p: &ProbDist) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn crowd_distribution(k: usize, dominant: usize, disagreement: bool) -> ProbDist {
    let mut w = vec![0.0; k];
    let runner_up = (dominant + 1) % k;
    if disagreement {
        if k == 2 {
            w[dominant] = 0.55;
            w[runner_up] = 0.45;
        } else {
            let rest = 0.1 / (k - 2) as f64;
            w.iter_mut().for_each(|v| *v = rest);
            w[dominant] = 0.5;
            w[runner_up] = 0.4;
        }
    } else {
        let rest = 0.05 / (k - 1) as f64;
        w.iter_mut().for_each(|v| *v = rest);
        w[dominant] = 0.95;
    }
    ProbDist::from_weights(&w).expect("positive weights")
}

fn base_distribution(k: usize, predicted: usize, confidence: f64) -> ProbDist {
    let rest = (1.0 - confidence) / (k - 1) as f64;
    let mut w = vec![rest; k];
    w[predicted] = confidence;
    ProbDist::from_weights(&w).expect("positive weights")
}

pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let k = config.num_classes;
    let d = config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(&mut rng, d, 2.0)).collect();
    let offset = gaussian_vec(&mut rng, d, 2.0);
    let annotator_ids: Vec<String> = (0..config.n_annotators).map(|i| format!("ann{i:03}")).collect();
    let width = (config.n.max(1) as f64).log10().floor() as usize + 1;

    let mut records = Vec::with_capacity(config.n);
    let mut truth = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let dominant = rng.random_range(0..k);
        let disagreement = rng.random::<f64>() < config.disagreement_fraction;
        let crowd = crowd_distribution(k, dominant, disagreement);

        let noise = gaussian_vec(&mut rng, d, config.feature_noise);
        let features: Vec<f64> = (0..d)
            .map(|j| centres[dominant][j] + if disagreement { offset[j] } else { 0.0 } + noise[j])
            .collect();

        let chosen: Vec<&String> = annotator_ids
            .choose_multiple(&mut rng, config.annotations_per_item)
            .collect();
        let mut annotations: Vec<Annotation> = chosen
            .into_iter()
            .map(|id| Annotation {
                annotator_id: id.clone(),
                label: sample_class(&mut rng, &crowd),
            })
            .collect();
        annotations.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
        let mut counts = vec![0u64; k];
        for a in &annotations {
            counts[a.label] += 1;
        }
        let gold = majority_vote(&counts)?.label;

        let (predicted, confidence) = if disagreement {
            let pick = if rng.random::<bool>() {
                dominant
            } else {
                (dominant + 1) % k
            };
            (pick, rng.random_range(0.8..0.99))
        } else if rng.random::<f64>() < config.base_accuracy {
            (dominant, rng.random_range(0.75..0.99))
        } else {
            let other = (dominant + rng.random_range(1..k)) % k;
            (other, rng.random_range(0.5..0.8))
        };
        let base = base_distribution(k, predicted, confidence);

        let mut record = SampleRecord::new(format!("item{i:0width$}"));
        record.features = Some(features);
        if config.emit_annotations {
            record.annotations = Some(annotations);
        }
        record.vote_counts = Some(counts);
        record.gold = Some(gold);
        record.base_logits = Some(base.iter().map(|p| p.ln()).collect());
        record.base_probs = Some(base);
        records.push(record);
        truth.push(ItemTruth {
            dominant_class: dominant,
            disagreement,
            crowd,
        });
    }
    let header = DatasetHeader {
        num_classes: k,
        feature_dim: Some(d),
    };
    Ok(Scenario {
        dataset: Dataset::new(header, records)?,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{agreement_summary, AgreementClass};

    #[test]
    fn generation_is_deterministic_and_valid() {
        let config = ScenarioConfig::default();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.len(), 500);
        let c = generate(&ScenarioConfig { seed: 1, ..config }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn disagreement_items_disagree_more_often() {
        let config = ScenarioConfig {
            n: 2000,
            n_annotators: 20,
            annotations_per_item: 10,
            ..ScenarioConfig::default()
        };
        let s = generate(&config).unwrap();
        let frac_disagree = |want: bool| {
            let items: Vec<_> = s
                .dataset
                .records
                .iter()
                .zip(&s.truth)
                .filter(|(_, t)| t.disagreement == want)
                .collect();
            let n = items
                .iter()
                .filter(|(r, _)| r.agreement_class(2).unwrap() == AgreementClass::Disagreement)
                .count();
            n as f64 / items.len() as f64
        };
        assert!(frac_disagree(true) > 0.95);
        assert!(frac_disagree(false) < 0.6);
        let summary = agreement_summary(&s.dataset.records, 2);
        assert_eq!(summary.n, 2000);
    }

    #[test]
    fn vote_counts_only_mode() {
        let s = generate(&ScenarioConfig {
            n: 10,
            emit_annotations: false,
            n_annotators: 100,
            annotations_per_item: 100,
            ..ScenarioConfig::default()
        })
        .unwrap();
        for r in &s.dataset.records {
            assert!(r.annotations.is_none());
            assert_eq!(r.vote_counts.as_ref().unwrap().iter().sum::<u64>(), 100);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&ScenarioConfig {
            n: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&ScenarioConfig {
            annotations_per_item: 4,
            ..Default::default()
        })
        .is_err());
    }
}
