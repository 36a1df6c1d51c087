//! Run configuration.
//!
//! A run is described by one JSON document. Relative paths are resolved
//! against the directory holding the config file. Two environment variables
//! override it: `CROWDCAL_OUTPUT_DIR` (output directory) and
//! `CROWDCAL_THREADS` (worker threads).
//!
//! ```json
//! {
//!   "dataset": "data.jsonl",
//!   "split": { "train": 0.6, "val": 0.2, "test": 0.2, "seed": 0 },
//!   "num_classes": 2,
//!   "estimator": { "mode": "panel", "min_annotation_count": 10 },
//!   "aggregations": ["label_dist", "avg_conf", "weighted"],
//!   "score_specs": ["JSD+E", "TVD+E"],
//!   "baselines": { "maxprob": true, "temp_scale": true, "correctness": false },
//!   "output_dir": "out"
//! }
//! ```
//!
//! Instead of `dataset` + `split`, pre-split files may be given as `train`,
//! `val` and `test`.

use std::path::{Path, PathBuf};

use crowd_calib::annotations::{SoftLabelMethod, SplitRatios};
use crowd_calib::distributions::ScoreSpec;
use crowd_calib::estimator::{Aggregation, MlpConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "CROWDCAL_OUTPUT_DIR";
pub const THREADS_ENV: &str = "CROWDCAL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Panel,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    #[serde(default = "default_min_count")]
    pub min_annotation_count: usize,
    /// Network settings. Defaults depend on the mode; the head always
    /// follows the mode.
    #[serde(default)]
    pub mlp: Option<MlpConfig>,
    /// Soft-label construction for direct-regressor targets.
    #[serde(default = "default_direct_targets")]
    pub direct_targets: SoftLabelMethod,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_count() -> usize {
    2000
}

fn default_direct_targets() -> SoftLabelMethod {
    SoftLabelMethod::Normalize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    #[serde(default = "yes")]
    pub maxprob: bool,
    #[serde(default = "yes")]
    pub temp_scale: bool,
    #[serde(default)]
    pub correctness: bool,
}

fn yes() -> bool {
    true
}

impl Default for Baselines {
    fn default() -> Self {
        Self {
            maxprob: true,
            temp_scale: true,
            correctness: false,
        }
    }
}

impl Baselines {
    fn any(&self) -> bool {
        self.maxprob || self.temp_scale || self.correctness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub num_classes: usize,
    pub estimator: EstimatorConfig,
    #[serde(default = "default_aggregations")]
    pub aggregations: Vec<Aggregation>,
    #[serde(default)]
    pub score_specs: Vec<ScoreSpec>,
    #[serde(default)]
    pub baselines: Baselines,
    #[serde(default = "default_targets")]
    pub cov_at_acc_targets: Vec<f64>,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    #[serde(default)]
    pub soft_label_method: SoftLabelMethod,
    /// Settings for the correctness calibrator network.
    #[serde(default)]
    pub correctness_mlp: Option<MlpConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_aggregations() -> Vec<Aggregation> {
    vec![Aggregation::AvgConf]
}

fn default_targets() -> Vec<f64> {
    vec![0.85, 0.90, 0.95]
}

fn default_ece_bins() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A parsed config with its provenance.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// sha256 of the config file bytes.
    pub hash: String,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads a config file, resolves relative paths and applies
    /// environment overrides.
    pub fn load(path: &Path) -> CliResult<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                config.output_dir = PathBuf::from(dir);
            }
        }
        let threads = match std::env::var(THREADS_ENV) {
            Ok(t) if !t.is_empty() => Some(
                t.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {t:?}")))?,
            ),
            _ => None,
        };
        config.validate()?;
        Ok(LoadedConfig {
            config,
            hash: hex::encode(Sha256::digest(&bytes)),
            threads,
        })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.dataset, &mut self.train, &mut self.val, &mut self.test]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.num_classes < 2 {
            return usage("num_classes must be at least 2".into());
        }
        match (&self.dataset, &self.train) {
            (Some(_), Some(_)) => return usage("give either dataset + split or train/val/test, not both".into()),
            (None, None) => return usage("no input data: set dataset or train".into()),
            (Some(_), None) => {
                if self.val.is_some() || self.test.is_some() {
                    return usage("val/test files cannot be combined with dataset".into());
                }
                let Some(s) = self.split else {
                    return usage("dataset needs split ratios".into());
                };
                SplitRatios::new(s.train, s.val, s.test)?;
            }
            (None, Some(_)) => {
                if self.test.is_none() {
                    return usage("test file missing".into());
                }
            }
        }
        for p in [&self.dataset, &self.train, &self.val, &self.test]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return usage(format!("input file {} does not exist", p.display()));
            }
        }
        if self.score_specs.is_empty() && !self.baselines.any() {
            return usage("nothing to evaluate: no score_specs and no baselines enabled".into());
        }
        if self.estimator.mode == EstimatorMode::Panel && !self.score_specs.is_empty() && self.aggregations.is_empty() {
            return usage("panel mode needs at least one aggregation".into());
        }
        if let Some(t) = self.cov_at_acc_targets.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return usage(format!("cov_at_acc target {t} outside (0, 1]"));
        }
        if self.ece_bins == 0 {
            return usage("ece_bins must be at least 1".into());
        }
        if let Some(m) = &self.estimator.mlp {
            m.validate()?;
        }
        if let Some(m) = &self.correctness_mlp {
            m.validate()?;
        }
        Ok(())
    }

    /// Network settings for the crowd estimator.
    pub fn estimator_mlp(&self) -> MlpConfig {
        let seed = self.estimator.seed;
        let defaults = match self.estimator.mode {
            EstimatorMode::Panel => MlpConfig::annotator_classifier(seed),
            EstimatorMode::Direct => MlpConfig::crowd_regressor(seed),
        };
        match &self.estimator.mlp {
            Some(m) => MlpConfig {
                head: defaults.head,
                ..m.clone()
            },
            None => defaults,
        }
    }

    pub fn correctness_config(&self) -> MlpConfig {
        self.correctness_mlp.clone().unwrap_or(MlpConfig {
            seed: self.estimator.seed,
            ..MlpConfig::default()
        })
    }

    /// Sorted and de-duplicated aggregations.
    pub fn aggregations(&self) -> Vec<Aggregation> {
        let mut a = self.aggregations.clone();
        a.sort();
        a.dedup();
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"train": "train.jsonl", "test": "test.jsonl", "num_classes": 2,
            "estimator": {"mode": "direct"}, "score_specs": ["JSD+E"]}"#
    }

    #[test]
    fn defaults_are_filled_in() {
        let c = RunConfig::from_json(minimal()).unwrap();
        assert_eq!(c.estimator.min_annotation_count, 2000);
        assert_eq!(c.cov_at_acc_targets, vec![0.85, 0.90, 0.95]);
        assert_eq!(c.ece_bins, 10);
        assert!(c.baselines.maxprob && c.baselines.temp_scale && !c.baselines.correctness);
        assert_eq!(c.estimator_mlp().hidden_sizes, vec![100, 100]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = minimal().replace("\"num_classes\"", "\"bogus\": 1, \"num_classes\"");
        assert!(matches!(RunConfig::from_json(&text), Err(CliError::Usage(_))));
    }

    #[test]
    fn nothing_to_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["train.jsonl", "test.jsonl"] {
            std::fs::write(dir.path().join(f), "{\"num_classes\":2}\n").unwrap();
        }
        let text = r#"{"train": "train.jsonl", "test": "test.jsonl", "num_classes": 2,
            "estimator": {"mode": "direct"},
            "baselines": {"maxprob": false, "temp_scale": false, "correctness": false}}"#;
        let path = dir.path().join("c.json");
        std::fs::write(&path, text).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("nothing to evaluate"));
        assert_eq!(err.exit_code(), 1);
    }
}
