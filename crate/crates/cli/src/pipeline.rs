//! The four pipeline stages: labels, train-estimator, score and evaluate.
//!
//! Output layout under the configured output directory:
//!
//! ```text
//! labels/{train,val,test}.jsonl
//! models/panel.json + models/annotator_NNN.json   (panel mode)
//! models/regressor.json                            (direct mode)
//! models/correctness.json                          (correctness baseline)
//! scores/<method>.csv
//! report/report.json, report/comparison.csv, report/curves/<method>.csv
//! manifest.json
//! ```
//!
//! Each stage clears its own output directory before writing, so a directory
//! only ever holds the outputs of the latest run of that stage.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use crowd_calib::annotations::{split_dataset, Dataset, SoftLabelMethod, SplitRatios};
use crowd_calib::distributions::ScoreSpec;
use crowd_calib::estimator::{
    annotator_counts, direct_training_set, estimate_crowd, select_annotators, train_mlp, train_panel, Aggregation,
    AnnotatorPanel, CrowdEstimate, CrowdEstimator, MlpModel, PanelMember, Targets,
};
use crowd_calib::evaluation::{evaluate_method, target_key, EvalReport, MethodInputs};
use crowd_calib::selector::{
    fit_correctness_calibrator, fit_temperature, logits_from_probs, scale_logits, CorrectnessCalibrator, ScoreSource,
};
use crowd_calib::ProbDist;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorMode, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{self, ScoreRow};

/// Digests of the files a stage read and wrote, keyed by path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageFiles {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl StageFiles {
    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), io::sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, root: &Path, path: &Path) -> CliResult<()> {
        let key = path.strip_prefix(root).unwrap_or(path).display().to_string();
        self.outputs.insert(key, io::sha256_file(path)?);
        Ok(())
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    /// Files the splits were read from.
    pub sources: Vec<PathBuf>,
}

impl Splits {
    pub fn named(&self) -> Vec<(&'static str, &Dataset)> {
        let mut v = vec![("train", &self.train)];
        if let Some(val) = &self.val {
            v.push(("val", val));
        }
        v.push(("test", &self.test));
        v
    }

    /// Split used to fit post-hoc calibrators: validation when it is
    /// non-empty, else train.
    fn calibration(&self) -> &Dataset {
        match &self.val {
            Some(v) if !v.is_empty() => v,
            _ => {
                log::warn!("no validation data; fitting calibrators on the training split");
                &self.train
            }
        }
    }
}

fn check_classes(config: &RunConfig, path: &Path, d: &Dataset) -> CliResult<()> {
    if d.num_classes() != config.num_classes {
        return Err(CliError::Data(format!(
            "{}: header has {} classes but the config says {}",
            path.display(),
            d.num_classes(),
            config.num_classes
        )));
    }
    Ok(())
}

pub fn load_splits(config: &RunConfig) -> CliResult<Splits> {
    if let Some(path) = &config.dataset {
        let all = io::read_dataset(path)?;
        check_classes(config, path, &all)?;
        let s = config
            .split
            .ok_or_else(|| CliError::Usage("dataset needs split ratios".into()))?;
        let split = split_dataset(&all.records, SplitRatios::new(s.train, s.val, s.test)?, s.seed)?;
        let make = |records| Dataset::new(all.header, records);
        return Ok(Splits {
            train: make(split.train)?,
            val: Some(make(split.val)?),
            test: make(split.test)?,
            sources: vec![path.clone()],
        });
    }
    let read = |p: &PathBuf| -> CliResult<Dataset> {
        let d = io::read_dataset(p)?;
        check_classes(config, p, &d)?;
        Ok(d)
    };
    let train_path = config
        .train
        .as_ref()
        .ok_or_else(|| CliError::Usage("train file missing".into()))?;
    let test_path = config
        .test
        .as_ref()
        .ok_or_else(|| CliError::Usage("test file missing".into()))?;
    let mut sources = vec![train_path.clone()];
    let val = match &config.val {
        Some(p) => {
            sources.push(p.clone());
            Some(read(p)?)
        }
        None => None,
    };
    sources.push(test_path.clone());
    Ok(Splits {
        train: read(train_path)?,
        val,
        test: read(test_path)?,
        sources,
    })
}

fn fresh_dir(path: &Path) -> CliResult<()> {
    if path.exists() {
        std::fs::remove_dir_all(path)?;
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn record_sources(files: &mut StageFiles, splits: &Splits) -> CliResult<()> {
    for p in &splits.sources {
        files.input(p)?;
    }
    Ok(())
}

pub fn stage_labels(config: &RunConfig) -> CliResult<StageFiles> {
    let splits = load_splits(config)?;
    let mut files = StageFiles::default();
    record_sources(&mut files, &splits)?;
    let root = &config.output_dir;
    let dir = root.join("labels");
    fresh_dir(&dir)?;
    for (name, d) in splits.named() {
        let path = dir.join(format!("{name}.jsonl"));
        io::write_labels(&path, d, config.soft_label_method).map_err(|e| e.context(name))?;
        files.output(root, &path)?;
    }
    Ok(files)
}

/// Index of a trained panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelIndex {
    pub num_classes: usize,
    pub annotators: Vec<PanelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub annotator_id: String,
    pub file: String,
    pub annotation_count: usize,
}

pub fn stage_train_estimator(config: &RunConfig) -> CliResult<StageFiles> {
    let splits = load_splits(config)?;
    let mut files = StageFiles::default();
    record_sources(&mut files, &splits)?;
    let root = &config.output_dir;
    let dir = root.join("models");
    let records = &splits.train.records;
    let mlp = config.estimator_mlp();
    let k = config.num_classes;

    match config.estimator.mode {
        EstimatorMode::Panel => {
            let min = config.estimator.min_annotation_count;
            let ids = select_annotators(records, min);
            let counts = annotator_counts(records);
            if ids.is_empty() {
                let listing = if counts.is_empty() {
                    "no annotations found".to_string()
                } else {
                    counts
                        .iter()
                        .map(|(id, c)| format!("{id}={c}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                };
                return Err(CliError::Data(format!(
                    "no annotator has more than {min} annotations in the training split ({listing})"
                )));
            }
            log::info!("training {} annotator models", ids.len());
            let panel = train_panel(records, &ids, &mlp, k)?;
            fresh_dir(&dir)?;
            let mut annotators = Vec::new();
            for (i, member) in panel.members().iter().enumerate() {
                let file = format!("annotator_{i:03}.json");
                let path = dir.join(&file);
                io::write_json(&path, &member.model)?;
                files.output(root, &path)?;
                annotators.push(PanelEntry {
                    annotator_id: member.annotator_id.clone(),
                    file,
                    annotation_count: counts[&member.annotator_id],
                });
            }
            let path = dir.join("panel.json");
            io::write_json(
                &path,
                &PanelIndex {
                    num_classes: k,
                    annotators,
                },
            )?;
            files.output(root, &path)?;
        }
        EstimatorMode::Direct => {
            let (xs, ys) = direct_training_set(records, k, config.estimator.direct_targets)?;
            let model = train_mlp(&xs, Targets::Dists(&ys), &mlp)?;
            fresh_dir(&dir)?;
            let path = dir.join("regressor.json");
            io::write_json(&path, &model)?;
            files.output(root, &path)?;
        }
    }
    Ok(files)
}

/// A loaded crowd estimator, before an aggregation is chosen.
pub enum LoadedEstimator {
    Panel(AnnotatorPanel),
    Direct(MlpModel),
}

pub fn load_estimator(config: &RunConfig, files: &mut StageFiles) -> CliResult<LoadedEstimator> {
    let dir = config.output_dir.join("models");
    let missing = |p: &Path| CliError::Data(format!("{} not found; run train-estimator first", p.display()));
    match config.estimator.mode {
        EstimatorMode::Panel => {
            let index_path = dir.join("panel.json");
            if !index_path.is_file() {
                return Err(missing(&index_path));
            }
            files.input(&index_path)?;
            let index: PanelIndex = io::read_json(&index_path)?;
            let mut members = Vec::new();
            for entry in &index.annotators {
                let path = dir.join(&entry.file);
                files.input(&path)?;
                members.push(PanelMember {
                    annotator_id: entry.annotator_id.clone(),
                    model: io::read_json(&path)?,
                });
            }
            Ok(LoadedEstimator::Panel(AnnotatorPanel::new(members)?))
        }
        EstimatorMode::Direct => {
            let path = dir.join("regressor.json");
            if !path.is_file() {
                return Err(missing(&path));
            }
            files.input(&path)?;
            Ok(LoadedEstimator::Direct(io::read_json(&path)?))
        }
    }
}

pub fn crowd_method_name(spec: ScoreSpec, aggregation: Option<Aggregation>) -> String {
    match aggregation {
        Some(a) => format!("crowd_{}_{}", a.as_str(), spec.slug()),
        None => format!("crowd_direct_{}", spec.slug()),
    }
}

fn logits_of(d: &Dataset, probs: &[ProbDist]) -> Vec<Vec<f64>> {
    d.records
        .iter()
        .zip(probs)
        .map(|(r, p)| r.base_logits.clone().unwrap_or_else(|| logits_from_probs(p)))
        .collect()
}

fn score_rows(
    d: &Dataset,
    probs: &[ProbDist],
    source: &ScoreSource,
    keep: impl Fn(usize) -> crowd_calib::Result<f64>,
) -> CliResult<Vec<ScoreRow>> {
    let k = d.num_classes();
    d.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let keep_score = keep(i)?;
            if !keep_score.is_finite() {
                return Err(CliError::Numeric(format!("non-finite keep score for {}", r.id)));
            }
            Ok(ScoreRow {
                sample_id: r.id.clone(),
                keep_score,
                source: source.to_string(),
                base_pred: Some(probs[i].argmax()),
                gold: r.gold_label(k).ok(),
            })
        })
        .collect()
}

pub fn stage_score(config: &RunConfig) -> CliResult<StageFiles> {
    let splits = load_splits(config)?;
    let mut files = StageFiles::default();
    record_sources(&mut files, &splits)?;
    let root = &config.output_dir;
    let test = &splits.test;
    if test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let probs = io::base_probs(test)?;
    let mut methods: Vec<(String, Vec<ScoreRow>)> = Vec::new();
    let mut extra_outputs = Vec::new();

    if config.baselines.maxprob {
        let rows = score_rows(test, &probs, &ScoreSource::MaxProb, |i| Ok(probs[i].max_prob()))?;
        methods.push(("maxprob".into(), rows));
    }
    if config.baselines.temp_scale {
        let cal = splits.calibration();
        let cal_probs = io::base_probs(cal)?;
        let gold = io::gold_labels(cal)?;
        let temperature = fit_temperature(&logits_of(cal, &cal_probs), &gold)?;
        log::info!("fitted temperature {temperature}");
        let logits = logits_of(test, &probs);
        let scaled = logits
            .iter()
            .map(|z| scale_logits(z, temperature))
            .collect::<crowd_calib::Result<Vec<_>>>()?;
        let source = ScoreSource::TemperatureScaled { temperature };
        methods.push((
            "maxprob_ts".into(),
            score_rows(test, &probs, &source, |i| Ok(scaled[i].max_prob()))?,
        ));
    }
    if config.baselines.correctness {
        let cal = splits.calibration();
        let cal_probs = io::base_probs(cal)?;
        let gold = io::gold_labels(cal)?;
        let correct: Vec<bool> = cal_probs.iter().zip(&gold).map(|(p, &g)| p.argmax() == g).collect();
        let calibrator =
            fit_correctness_calibrator(&io::features(cal)?, &cal_probs, &correct, &config.correctness_config())?;
        let xs = io::features(test)?;
        let rows = score_rows(test, &probs, &ScoreSource::Correctness, |i| {
            calibrator.keep_probability(&xs[i], &probs[i])
        })?;
        methods.push(("correctness".into(), rows));
        extra_outputs.push(calibrator);
    }

    if !config.score_specs.is_empty() {
        let estimator = load_estimator(config, &mut files)?;
        let xs = io::features(test)?;
        let variants: Vec<(Option<Aggregation>, CrowdEstimator)> = match estimator {
            LoadedEstimator::Direct(model) => vec![(None, CrowdEstimator::Direct(model))],
            LoadedEstimator::Panel(panel) => config
                .aggregations()
                .into_iter()
                .map(|a| {
                    (
                        Some(a),
                        CrowdEstimator::Panel {
                            panel: panel.clone(),
                            aggregation: a,
                        },
                    )
                })
                .collect(),
        };
        for (aggregation, estimator) in &variants {
            let estimates = xs
                .par_iter()
                .map(|x| estimate_crowd(estimator, x))
                .collect::<crowd_calib::Result<Vec<CrowdEstimate>>>()?;
            for &spec in &config.score_specs {
                let source = ScoreSource::CrowdCalib {
                    spec,
                    aggregation: *aggregation,
                };
                let rows = score_rows(test, &probs, &source, |i| Ok(-estimates[i].score(spec, &probs[i])?))?;
                methods.push((crowd_method_name(spec, *aggregation), rows));
            }
        }
    }

    methods.sort_by(|a, b| a.0.cmp(&b.0));
    methods.dedup_by(|a, b| a.0 == b.0);
    let dir = root.join("scores");
    fresh_dir(&dir)?;
    for (name, rows) in &methods {
        let path = dir.join(format!("{name}.csv"));
        io::write_scores(&path, rows)?;
        files.output(root, &path)?;
    }
    for calibrator in extra_outputs {
        let models = root.join("models");
        std::fs::create_dir_all(&models)?;
        let path = models.join("correctness.json");
        io::write_json::<CorrectnessCalibrator>(&path, &calibrator)?;
        files.output(root, &path)?;
    }
    Ok(files)
}

/// Lists the first ten ids that appear on only one side.
fn id_mismatch(method: &str, dataset_ids: &[String], score_ids: &[String]) -> CliError {
    let a: HashSet<&String> = dataset_ids.iter().collect();
    let b: HashSet<&String> = score_ids.iter().collect();
    let mut offending: Vec<&str> = score_ids
        .iter()
        .filter(|id| !a.contains(id))
        .map(String::as_str)
        .collect();
    offending.extend(dataset_ids.iter().filter(|id| !b.contains(id)).map(String::as_str));
    let mut seen = HashSet::new();
    let dupes: Vec<&str> = score_ids
        .iter()
        .filter(|id| !seen.insert(*id))
        .map(String::as_str)
        .collect();
    offending.extend(dupes);
    offending.truncate(10);
    CliError::Data(format!(
        "{method}: scores do not match the dataset ids; first offending ids: {}",
        offending.join(", ")
    ))
}

/// One scored method, aligned to the evaluation dataset.
pub struct AlignedScores {
    pub method: String,
    pub keep: Vec<f64>,
    pub source: ScoreSource,
}

pub fn align_scores(method: &str, dataset: &Dataset, rows: &[ScoreRow]) -> CliResult<AlignedScores> {
    let dataset_ids: Vec<String> = dataset.records.iter().map(|r| r.id.clone()).collect();
    let score_ids: Vec<String> = rows.iter().map(|r| r.sample_id.clone()).collect();
    let by_id: HashMap<&str, &ScoreRow> = rows.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    if rows.len() != dataset_ids.len()
        || by_id.len() != rows.len()
        || dataset_ids.iter().any(|id| !by_id.contains_key(id.as_str()))
    {
        return Err(id_mismatch(method, &dataset_ids, &score_ids));
    }
    let first = rows
        .first()
        .ok_or_else(|| CliError::Data(format!("{method}: no scores")))?;
    let source = first.source()?;
    if rows.iter().any(|r| r.source != first.source) {
        return Err(CliError::Data(format!("{method}: mixed score sources in one file")));
    }
    let keep = dataset_ids.iter().map(|id| by_id[id.as_str()].keep_score).collect();
    Ok(AlignedScores {
        method: method.to_string(),
        keep,
        source,
    })
}

/// Evaluation settings shared by the config-driven and file-driven paths.
pub struct EvalSettings {
    pub targets: Vec<f64>,
    pub ece_bins: usize,
    pub soft_label_method: SoftLabelMethod,
}

/// Evaluates every scores file against `dataset` and writes the report,
/// curves and comparison table into `out_dir`.
pub fn evaluate_files(
    dataset: &Dataset,
    score_files: &[PathBuf],
    settings: &EvalSettings,
    out_dir: &Path,
    files: &mut StageFiles,
    root: &Path,
) -> CliResult<Vec<EvalReport>> {
    if score_files.is_empty() {
        return Err(CliError::Usage("nothing to evaluate: no scores files".into()));
    }
    if dataset.is_empty() {
        return Err(CliError::Data("evaluation dataset is empty".into()));
    }
    let k = dataset.num_classes();
    let probs = io::base_probs(dataset)?;
    let gold = io::gold_labels(dataset)?;
    let soft: Option<Vec<ProbDist>> = dataset
        .records
        .iter()
        .map(|r| r.soft_label(k, settings.soft_label_method).ok())
        .collect();
    let logits = logits_of(dataset, &probs);

    let mut aligned = Vec::new();
    for path in score_files {
        files.input(path)?;
        let method = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Usage(format!("bad scores file name {}", path.display())))?;
        aligned.push(align_scores(method, dataset, &io::read_scores(path)?)?);
    }
    aligned.sort_by(|a, b| a.method.cmp(&b.method));
    if let Some(w) = aligned.windows(2).find(|w| w[0].method == w[1].method) {
        return Err(CliError::Usage(format!("duplicate method {}", w[0].method)));
    }

    let results = aligned
        .par_iter()
        .map(|a| -> CliResult<_> {
            let method_probs = match a.source {
                ScoreSource::TemperatureScaled { temperature } => logits
                    .iter()
                    .map(|z| scale_logits(z, temperature))
                    .collect::<crowd_calib::Result<Vec<_>>>()?,
                _ => probs.clone(),
            };
            let inputs = MethodInputs {
                method: &a.method,
                keep_scores: &a.keep,
                probs: &method_probs,
                gold: &gold,
                soft_labels: soft.as_deref(),
            };
            Ok(evaluate_method(&inputs, &settings.targets, settings.ece_bins)?)
        })
        .collect::<CliResult<Vec<_>>>()?;

    fresh_dir(out_dir)?;
    let curves = out_dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    for r in &results {
        let path = curves.join(format!("{}.csv", r.report.method));
        io::write_curve(&path, &r.curve)?;
        files.output(root, &path)?;
    }
    let reports: Vec<EvalReport> = results.into_iter().map(|r| r.report).collect();
    let path = out_dir.join("report.json");
    io::write_json(&path, &reports)?;
    files.output(root, &path)?;
    let path = out_dir.join("comparison.csv");
    write_comparison(&path, &reports, &settings.targets)?;
    files.output(root, &path)?;
    Ok(reports)
}

fn write_comparison(path: &Path, reports: &[EvalReport], targets: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["method", "auc", "auroc", "aubs", "ece", "brier", "macro_f1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(targets.iter().map(|t| format!("cov@acc={}", target_key(*t))));
    header.extend(["soft_jsd", "soft_tvd", "soft_ce"].map(String::from));
    w.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    for r in reports {
        let mut row = vec![
            r.method.clone(),
            fmt(Some(r.auc)),
            fmt(r.auroc),
            fmt(Some(r.aubs)),
            fmt(Some(r.ece)),
            fmt(Some(r.brier)),
            fmt(Some(r.macro_f1)),
        ];
        row.extend(
            targets
                .iter()
                .map(|t| fmt(r.cov_at_acc.get(&target_key(*t)).copied().flatten())),
        );
        row.push(fmt(r.soft.map(|s| s.mean_jsd)));
        row.push(fmt(r.soft.map(|s| s.mean_tvd)));
        row.push(fmt(r.soft.map(|s| s.mean_ce_soft)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn scores_in(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} not found; run score first", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn stage_evaluate(config: &RunConfig) -> CliResult<StageFiles> {
    let splits = load_splits(config)?;
    let mut files = StageFiles::default();
    record_sources(&mut files, &splits)?;
    let root = &config.output_dir;
    let score_files = scores_in(&root.join("scores"))?;
    let settings = EvalSettings {
        targets: config.cov_at_acc_targets.clone(),
        ece_bins: config.ece_bins,
        soft_label_method: config.soft_label_method,
    };
    evaluate_files(
        &splits.test,
        &score_files,
        &settings,
        &root.join("report"),
        &mut files,
        root,
    )?;
    Ok(files)
}
