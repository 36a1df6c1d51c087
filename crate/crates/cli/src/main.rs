use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowd_calib::annotations::SoftLabelMethod;
use crowd_calib::synthetic::ScenarioConfig;
use crowd_calib_cli::config::{RunConfig, THREADS_ENV};
use crowd_calib_cli::error::{CliError, CliResult};
use crowd_calib_cli::fixture::{write_fixture, FixtureOptions};
use crowd_calib_cli::io;
use crowd_calib_cli::manifest::{run_all, run_stage};
use crowd_calib_cli::pipeline::{evaluate_files, EvalSettings, StageFiles};
use crowd_calib_cli::LoadedConfig;

#[derive(Parser)]
#[command(name = "crowdcal", version, about = "Crowd-aware selective prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` (and CROWDCAL_OUTPUT_DIR).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    ece_bins: Option<usize>,
    #[arg(long)]
    min_annotation_count: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Derive hard labels, soft labels and agreement classes.
    Labels {
        #[arg(long, conflicts_with_all = ["dataset", "out"])]
        config: Option<PathBuf>,
        #[arg(long, requires = "out")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "softmax")]
        method: SoftLabelMethod,
    },
    /// Train the crowd estimator (annotator panel or direct regressor).
    TrainEstimator(ConfigArgs),
    /// Write one scores file per method.
    Score(ConfigArgs),
    /// Evaluate scores files into a report, curves and a comparison table.
    Evaluate {
        #[arg(long, conflicts_with_all = ["dataset", "scores", "out"])]
        config: Option<PathBuf>,
        #[arg(long, requires_all = ["scores", "out"])]
        dataset: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        ece_bins: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.85, 0.90, 0.95])]
        targets: Vec<f64>,
        #[arg(long, default_value = "softmax")]
        soft_label_method: SoftLabelMethod,
    },
    /// Run labels, train-estimator, score and evaluate in order.
    Run(ConfigArgs),
    /// Write a synthetic dataset and a matching config.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        #[arg(long, default_value_t = 3)]
        annotators: usize,
        #[arg(long, default_value_t = 3)]
        per_item: usize,
        #[arg(long, default_value_t = 0.3)]
        disagreement: f64,
        #[arg(long, default_value_t = 10)]
        min_annotation_count: usize,
        /// Configure a direct crowd regressor instead of a panel.
        #[arg(long)]
        direct: bool,
    },
}

fn load(args: &ConfigArgs) -> CliResult<LoadedConfig> {
    let mut loaded = RunConfig::load(&args.config)?;
    let c = &mut loaded.config;
    if let Some(dir) = &args.output_dir {
        c.output_dir = dir.clone();
    }
    if let Some(b) = args.ece_bins {
        c.ece_bins = b;
    }
    if let Some(m) = args.min_annotation_count {
        c.estimator.min_annotation_count = m;
    }
    c.validate()?;
    if let Some(n) = loaded.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("{THREADS_ENV} ignored: {e}");
        }
    }
    Ok(loaded)
}

fn config_only(config: PathBuf) -> ConfigArgs {
    ConfigArgs {
        config,
        output_dir: None,
        ece_bins: None,
        min_annotation_count: None,
    }
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Labels {
            config: Some(config), ..
        } => run_stage("labels", &load(&config_only(config))?),
        Command::Labels {
            dataset: Some(dataset),
            out: Some(out),
            method,
            ..
        } => {
            let d = io::read_dataset(&dataset)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            io::write_labels(&out, &d, method)
        }
        Command::Labels { .. } => Err(CliError::Usage("labels needs --config or --dataset with --out".into())),
        Command::TrainEstimator(args) => run_stage("train_estimator", &load(&args)?),
        Command::Score(args) => run_stage("score", &load(&args)?),
        Command::Evaluate {
            config: Some(config), ..
        } => run_stage("evaluate", &load(&config_only(config))?),
        Command::Evaluate {
            dataset: Some(dataset),
            scores,
            out: Some(out),
            ece_bins,
            targets,
            soft_label_method,
            ..
        } => {
            if ece_bins == 0 {
                return Err(CliError::Usage("--ece-bins must be at least 1".into()));
            }
            if let Some(t) = targets.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
                return Err(CliError::Usage(format!("target {t} outside (0, 1]")));
            }
            let d = io::read_dataset(&dataset)?;
            let settings = EvalSettings {
                targets,
                ece_bins,
                soft_label_method,
            };
            let mut files = StageFiles::default();
            evaluate_files(&d, &scores, &settings, &out, &mut files, &out)?;
            Ok(())
        }
        Command::Evaluate { .. } => Err(CliError::Usage(
            "evaluate needs --config or --dataset with --scores and --out".into(),
        )),
        Command::Run(args) => {
            let manifest = run_all(&load(&args)?)?;
            let outputs: usize = manifest.stages.iter().map(|s| s.files.outputs.len()).sum();
            println!("completed {} stages, {outputs} files", manifest.stages.len());
            Ok(())
        }
        Command::GenFixture {
            out,
            n,
            seed,
            num_classes,
            annotators,
            per_item,
            disagreement,
            min_annotation_count,
            direct,
        } => {
            let options = FixtureOptions {
                scenario: ScenarioConfig {
                    n,
                    seed,
                    num_classes,
                    n_annotators: annotators,
                    annotations_per_item: per_item,
                    disagreement_fraction: disagreement,
                    ..ScenarioConfig::default()
                },
                min_annotation_count,
                direct,
            };
            write_fixture(&out, &options)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
