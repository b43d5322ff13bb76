//! Stage driver behind the `advdev` binary.
//!
//! Every stage reads its inputs from the run directory and writes its outputs
//! there:
//!
//! | stage           | writes                                                      |
//! |-----------------|-------------------------------------------------------------|
//! | `train`         | `model.advd`, `train.json`                                  |
//! | `attack`        | `clean.advs`, `clean_ids.json`, `attacks/<id>.advs`, `attacks/<id>.mask.json`, `attacks.json` |
//! | `analyze`       | `results/deviations.csv`, `results/summary.json`, `results/normalization.json` |
//! | `plot`          | `plots/violin_<attack>_<metric>.svg`                        |
//! | `sample-images` | `images/samples.ppm`                                        |

use std::path::{Path, PathBuf};
use std::time::Instant;

use advdev::attacks::attack_dataset;
use advdev::deviation::{
    compute_deviations, extract_representations, normalization_constants, summarize, NormalizationConstants,
};
use advdev::io::config::{DatasetSource, RunConfig};
use advdev::io::data::{self, DatasetContainer, SuccessMask};
use advdev::io::{persist, ppm, report, svg, write_atomic};
use advdev::network::{evaluate_accuracy, train, Model};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub const MODEL_FILE: &str = "model.advd";
pub const TRAIN_FILE: &str = "train.json";
pub const CLEAN_FILE: &str = "clean.advs";
pub const CLEAN_IDS_FILE: &str = "clean_ids.json";
pub const ATTACKS_DIR: &str = "attacks";
pub const ATTACKS_FILE: &str = "attacks.json";
pub const RESULTS_DIR: &str = "results";
pub const PLOTS_DIR: &str = "plots";
pub const IMAGES_DIR: &str = "images";
pub const SAMPLES_FILE: &str = "samples.ppm";

#[derive(Debug, Parser)]
#[command(name = "advdev", version, about = "Adversarial attacks and representation deviations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and save it.
    Train(Common),
    /// Attack the correctly classified test records.
    Attack(Common),
    /// Compute normalized deviations and their summaries.
    Analyze(Common),
    /// Render violin plots from the summaries.
    Plot(Common),
    /// Run train, attack, analyze, plot and sample-images.
    Pipeline(Common),
    /// Export a grid of clean and attacked images.
    SampleImages(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs {} from an earlier stage; run `{needs}` first", path.display())]
    MissingStage {
        stage: &'static str,
        needs: &'static str,
        path: PathBuf,
    },
    #[error(transparent)]
    Runtime(#[from] advdev::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::MissingStage { .. } | CliError::Runtime(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub train_records: usize,
    pub test_records: usize,
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub records: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_l2: f64,
    pub max_linf: f64,
}

/// Resolved configuration plus the run directory.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn load(common: &Common) -> CliResult<Self> {
        if !common.config.is_file() {
            return Err(CliError::Config(format!("config file {} not found", common.config.display())));
        }
        let mut config = RunConfig::load(&common.config).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        if let Some(out) = &common.out {
            config.output_dir = out.clone();
        }
        let dir = config.output_dir.clone();
        Ok(Run { config, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn attack_path(&self, id: &str, suffix: &str) -> PathBuf {
        self.dir.join(ATTACKS_DIR).join(format!("{id}{suffix}"))
    }

    fn require(&self, stage: &'static str, needs: &'static str, path: PathBuf) -> CliResult<PathBuf> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingStage { stage, needs, path })
        }
    }

    fn datasets(&self) -> CliResult<(DatasetContainer, DatasetContainer)> {
        Ok(match &self.config.dataset {
            DatasetSource::Cifar10 {
                path,
                train_records,
                test_records,
            } => data::load_cifar10_split(path, *train_records, *test_records)?,
            DatasetSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
            } => {
                let all = data::generate_synthetic(*classes, train_per_class + test_per_class, self.config.seed)?;
                let split = classes * train_per_class;
                let train_ids: Vec<usize> = (0..split).collect();
                let test_ids: Vec<usize> = (split..all.len()).collect();
                (all.select(&train_ids), all.select(&test_ids))
            }
        })
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[advdev] {}", msg.as_ref());
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(advdev::Error::from)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| advdev::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_slice(&bytes).map_err(advdev::Error::from)?)
}

pub fn stage_train(run: &Run) -> CliResult<TrainReport> {
    let cfg = &run.config;
    let (train_set, test_set) = run.datasets()?;
    let arch = cfg.model.architecture().map_err(|e| CliError::Config(e.to_string()))?;
    let mut model = Model::build(arch, cfg.seed)?;
    let tc = cfg.train.with_seed(cfg.seed);
    log(format!(
        "training on {} records for {} epochs ({} parameters)",
        train_set.len(),
        tc.epochs,
        model.parameter_count()
    ));
    let start = Instant::now();
    let history = train(&mut model, &train_set.images, &train_set.labels, &tc)?;
    log(format!(
        "trained in {:.1}s, final loss {:.4}",
        start.elapsed().as_secs_f64(),
        history.epoch_loss.last().copied().unwrap_or(f64::NAN)
    ));
    let report = TrainReport {
        seed: cfg.seed,
        epochs: tc.epochs,
        train_records: train_set.len(),
        test_records: test_set.len(),
        epoch_loss: history.epoch_loss,
        train_accuracy: evaluate_accuracy(&model, &train_set.images, &train_set.labels)?,
        test_accuracy: evaluate_accuracy(&model, &test_set.images, &test_set.labels)?,
    };
    log(format!(
        "accuracy: train {:.4}, test {:.4}",
        report.train_accuracy, report.test_accuracy
    ));
    persist::save_model(&model, &run.path(MODEL_FILE))?;
    write_json(&run.path(TRAIN_FILE), &report)?;
    Ok(report)
}

pub fn stage_attack(run: &Run) -> CliResult<Vec<AttackReport>> {
    let model = persist::load_model(&run.require("attack", "train", run.path(MODEL_FILE))?)?;
    let (_, test_set) = run.datasets()?;
    let predictions: Vec<usize> = test_set
        .images
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<_, _>>()?;
    let kept: Vec<usize> = (0..test_set.len()).filter(|&i| predictions[i] == test_set.labels[i]).collect();
    if kept.is_empty() {
        return Err(advdev::Error::InvalidArgument("no test record is classified correctly".into()).into());
    }
    log(format!("{} of {} test records are classified correctly", kept.len(), test_set.len()));
    let clean = test_set.select(&kept);
    data::save_dataset(&clean, &run.path(CLEAN_FILE))?;
    write_json(&run.path(CLEAN_IDS_FILE), &kept)?;

    let mut reports = Vec::new();
    for spec in &run.config.attacks {
        let start = Instant::now();
        let outcome = attack_dataset(&model, &clean.images, &clean.labels, spec)?;
        let adv = DatasetContainer::new(outcome.adversarial_images(), clean.labels.clone(), spec.id())?;
        data::save_dataset(&adv, &run.attack_path(spec.id(), ".advs"))?;
        data::save_mask(
            &SuccessMask::new(spec.id(), outcome.success_mask.clone()),
            &run.attack_path(spec.id(), ".mask.json"),
        )?;
        let successes = outcome.success_mask.iter().filter(|&&s| s).count();
        let report = AttackReport {
            attack: spec.id().to_string(),
            records: clean.len(),
            successes,
            success_rate: outcome.success_rate,
            mean_l2: outcome.results.iter().map(|r| r.l2).sum::<f64>() / clean.len() as f64,
            max_linf: outcome.results.iter().map(|r| r.linf).fold(0.0, f64::max),
        };
        log(format!(
            "{}: success {:.4} ({successes}/{}), {:.1}s",
            spec.id(),
            report.success_rate,
            clean.len(),
            start.elapsed().as_secs_f64()
        ));
        reports.push(report);
    }
    write_json(&run.path(ATTACKS_FILE), &reports)?;
    Ok(reports)
}

pub fn stage_analyze(run: &Run) -> CliResult<()> {
    let cfg = &run.config;
    let model = persist::load_model(&run.require("analyze", "train", run.path(MODEL_FILE))?)?;
    let clean = data::load_dataset(&run.require("analyze", "attack", run.path(CLEAN_FILE))?)?;
    let ids: Vec<usize> = read_json(&run.require("analyze", "attack", run.path(CLEAN_IDS_FILE))?)?;
    if ids.len() != clean.len() {
        return Err(advdev::Error::InvalidArgument("clean ids do not match the clean dataset".into()).into());
    }
    let selection = cfg.analysis.checkpoints.as_deref();
    let clean_reps = extract_representations(&model, &clean.images, &ids, selection)?;
    let consts: Vec<NormalizationConstants> = cfg
        .analysis
        .metrics
        .iter()
        .map(|&m| normalization_constants(&clean_reps, m, cfg.analysis.max_pairs, cfg.seed))
        .collect::<Result<_, _>>()?;
    for c in &consts {
        log(format!(
            "{} constants from {} pairs{}",
            c.metric,
            c.pair_count,
            if c.near_zero_pairs > 0 {
                format!(", {} near-zero cosine pairs", c.near_zero_pairs)
            } else {
                String::new()
            }
        ));
    }

    let mut tables = Vec::new();
    let mut summaries = Vec::new();
    for spec in &cfg.attacks {
        let adv = data::load_dataset(&run.require("analyze", "attack", run.attack_path(spec.id(), ".advs"))?)?;
        let mask = data::load_mask(&run.require("analyze", "attack", run.attack_path(spec.id(), ".mask.json"))?)?;
        if adv.len() != clean.len() || mask.success.len() != clean.len() {
            return Err(advdev::Error::InvalidArgument(format!("attack `{}` outputs do not match the clean set", spec.id())).into());
        }
        let adv_reps = extract_representations(&model, &adv.images, &ids, selection)?;
        let table = compute_deviations(&clean_reps, &adv_reps, &consts, Some(&mask.success), spec.id())?;
        if table.is_empty() {
            return Err(advdev::Error::InvalidArgument(format!("attack `{}` never succeeded; nothing to analyze", spec.id())).into());
        }
        if table.near_zero_rows > 0 {
            log(format!("{}: {} near-zero cosine rows", spec.id(), table.near_zero_rows));
        }
        summaries.extend(summarize(&table, cfg.analysis.grid_points)?);
        tables.push(table);
    }
    report::write_results(&run.path(RESULTS_DIR), &tables, &summaries, &consts)?;
    log(format!("wrote results for {} attacks", tables.len()));
    Ok(())
}

pub fn stage_plot(run: &Run) -> CliResult<Vec<PathBuf>> {
    let summary_path = run.path(RESULTS_DIR).join(report::SUMMARY_FILE);
    let summary = report::load_summary(&run.require("plot", "analyze", summary_path)?)?;
    let paths = svg::render_all(&summary.summaries, &run.path(PLOTS_DIR))?;
    log(format!("wrote {} plots", paths.len()));
    Ok(paths)
}

pub fn stage_sample_images(run: &Run) -> CliResult<PathBuf> {
    let clean = data::load_dataset(&run.require("sample-images", "attack", run.path(CLEAN_FILE))?)?;
    let n = run.config.images.count.min(clean.len());
    let mut rows = vec![clean.images[..n].to_vec()];
    for spec in &run.config.attacks {
        let adv = data::load_dataset(&run.require("sample-images", "attack", run.attack_path(spec.id(), ".advs"))?)?;
        rows.push(adv.images[..n].to_vec());
    }
    let path = run.path(IMAGES_DIR).join(SAMPLES_FILE);
    ppm::export_image_ppm(&ppm::image_grid(&rows)?, &path)?;
    log(format!("wrote {}", path.display()));
    Ok(path)
}

pub fn execute(command: &Command) -> CliResult<()> {
    let (Command::Train(c)
    | Command::Attack(c)
    | Command::Analyze(c)
    | Command::Plot(c)
    | Command::Pipeline(c)
    | Command::SampleImages(c)) = command;
    let run = Run::load(c)?;
    match command {
        Command::Train(_) => stage_train(&run).map(drop),
        Command::Attack(_) => stage_attack(&run).map(drop),
        Command::Analyze(_) => stage_analyze(&run),
        Command::Plot(_) => stage_plot(&run).map(drop),
        Command::SampleImages(_) => stage_sample_images(&run).map(drop),
        Command::Pipeline(_) => {
            stage_train(&run)?;
            stage_attack(&run)?;
            stage_analyze(&run)?;
            stage_plot(&run)?;
            stage_sample_images(&run).map(drop)
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
