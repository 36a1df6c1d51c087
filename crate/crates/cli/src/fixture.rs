//! Synthetic fixtures: a dataset plus a ready-to-run config.

use std::path::Path;

use crowd_calib::synthetic::{generate, ScenarioConfig};
use serde_json::json;

use crate::error::CliResult;
use crate::io;

pub struct FixtureOptions {
    pub scenario: ScenarioConfig,
    /// Minimum annotation count written into the config.
    pub min_annotation_count: usize,
    pub direct: bool,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig {
                n: 300,
                ..ScenarioConfig::default()
            },
            min_annotation_count: 10,
            direct: false,
        }
    }
}

/// Writes `data.jsonl` and `config.json` into `dir`.
pub fn write_fixture(dir: &Path, options: &FixtureOptions) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let scenario = generate(&options.scenario)?;
    io::write_dataset(&dir.join("data.jsonl"), &scenario.dataset)?;
    let mode = if options.direct { "direct" } else { "panel" };
    let config = json!({
        "dataset": "data.jsonl",
        "split": { "train": 0.6, "val": 0.2, "test": 0.2, "seed": options.scenario.seed },
        "num_classes": options.scenario.num_classes,
        "estimator": {
            "mode": mode,
            "min_annotation_count": options.min_annotation_count,
            "seed": options.scenario.seed,
            "mlp": {
                "hidden_sizes": if options.direct { vec![32, 32] } else { vec![32] },
                "head": if options.direct { "regressor_linear" } else { "classifier_softmax" },
                "learning_rate": 0.001,
                "max_epochs": 200,
                "batch_size": 200,
                "l2": 0.0001,
                "seed": options.scenario.seed
            }
        },
        "aggregations": ["label_dist", "avg_conf", "weighted"],
        "score_specs": ["KL", "JSD", "TVD", "KL+E", "JSD+E", "TVD+E"],
        "baselines": { "maxprob": true, "temp_scale": true, "correctness": true },
        "cov_at_acc_targets": [0.85, 0.90, 0.95],
        "ece_bins": 10,
        "soft_label_method": "softmax",
        "correctness_mlp": {
            "hidden_sizes": [16],
            "head": "classifier_softmax",
            "learning_rate": 0.001,
            "max_epochs": 200,
            "batch_size": 200,
            "l2": 0.0001,
            "seed": options.scenario.seed
        },
        "output_dir": "out"
    });
    io::write_json(&dir.join("config.json"), &config)
}
