use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};
use crate::io;
use crate::pipeline::{self, StageFiles};

pub const STAGES: [&str; 4] = ["labels", "train_estimator", "score", "evaluate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    #[serde(flatten)]
    pub files: StageFiles,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub stages: Vec<StageEntry>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
            failed_stage: None,
            error: None,
        }
    }

    /// The existing manifest in `dir` if it belongs to the same config,
    /// otherwise a fresh one.
    pub fn load_or_new(dir: &Path, config_hash: &str) -> Self {
        match io::read_json::<RunManifest>(&dir.join("manifest.json")) {
            Ok(m) if m.config_hash == config_hash => m,
            _ => Self::new(config_hash),
        }
    }

    /// Inserts or replaces a stage entry, keeping pipeline order.
    pub fn record(&mut self, entry: StageEntry) {
        self.stages.retain(|s| s.name != entry.name);
        self.stages.push(entry);
        let rank = |n: &str| STAGES.iter().position(|s| *s == n).unwrap_or(STAGES.len());
        self.stages.sort_by_key(|s| rank(&s.name));
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        io::write_json(&dir.join("manifest.json"), self)
    }
}

fn stage_fn(name: &str) -> fn(&crate::config::RunConfig) -> CliResult<StageFiles> {
    match name {
        "labels" => pipeline::stage_labels,
        "train_estimator" => pipeline::stage_train_estimator,
        "score" => pipeline::stage_score,
        "evaluate" => pipeline::stage_evaluate,
        other => unreachable!("unknown stage {other}"),
    }
}

fn timed(name: &str, loaded: &LoadedConfig) -> CliResult<StageEntry> {
    log::info!("stage {name}");
    let start = Instant::now();
    let files = stage_fn(name)(&loaded.config).map_err(|e| e.context(format!("stage {name}")))?;
    Ok(StageEntry {
        name: name.to_string(),
        files,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn fail(manifest: &mut RunManifest, dir: &Path, name: &str, err: CliError) -> CliError {
    manifest.failed_stage = Some(name.to_string());
    manifest.error = Some(err.to_string());
    if let Err(e) = manifest.write(dir) {
        log::error!("could not write manifest: {e}");
    }
    err
}

/// Runs one stage and updates the manifest in the output directory.
pub fn run_stage(name: &str, loaded: &LoadedConfig) -> CliResult<()> {
    let dir = &loaded.config.output_dir;
    std::fs::create_dir_all(dir)?;
    let mut manifest = RunManifest::load_or_new(dir, &loaded.hash);
    match timed(name, loaded) {
        Ok(entry) => {
            manifest.record(entry);
            if manifest.failed_stage.as_deref() == Some(name) {
                manifest.failed_stage = None;
                manifest.error = None;
            }
            manifest.write(dir)
        }
        Err(e) => Err(fail(&mut manifest, dir, name, e)),
    }
}

/// Runs every stage in order and writes a fresh manifest last. The crowd
/// estimator is not trained when no crowd scores are requested.
pub fn run_all(loaded: &LoadedConfig) -> CliResult<RunManifest> {
    let dir = &loaded.config.output_dir;
    std::fs::create_dir_all(dir)?;
    let mut manifest = RunManifest::new(&loaded.hash);
    for name in STAGES {
        if name == "train_estimator" && loaded.config.score_specs.is_empty() {
            log::info!("no score_specs; skipping estimator training");
            continue;
        }
        match timed(name, loaded) {
            Ok(entry) => manifest.record(entry),
            Err(e) => return Err(fail(&mut manifest, dir, name, e)),
        }
    }
    manifest.write(dir)?;
    Ok(manifest)
}
