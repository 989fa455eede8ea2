//! Command-line front end for the bootseg self-learning loop.
//!
//! Every subcommand goes through [`run_command`], which returns the process
//! exit code: 0 on success, 1 on a domain error, 2 on a usage error.

pub mod report;

pub use report::{
    best_point, points, render_report, render_summary, render_svg, Point, ReportError, ReportFiles, REPORT_SVG,
    SUMMARY_TXT,
};

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bootseg::data::{load_coco, parse_coco, AnnotatedDataset, DataError, Detection, LoadOptions, Partition};
use bootseg::detector::ImageStore;
use bootseg::eval::{evaluate_dataset, EvalError, EvalParams};
use bootseg::selfloop::{
    continue_run, grid_search, loio_eval, restore_run, run_loop, GridSpec, LoioSpec, LoopError, RunConfig, RunSummary,
    GRID_FILE, LOIO_FILE,
};
use bootseg::synth::{generate_experiment, ExperimentSpec, SynthError, DATASET_FILE};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Default run directory when `--run-dir` is absent.
pub const RUN_DIR_ENV: &str = "BOOTSEG_RUN_DIR";

/// Keys a CLI config file may hold in addition to the loop configuration.
const PATH_KEYS: [&str; 2] = ["dataset", "images"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bootseg",
    version,
    about = "Bootstrapped self-learning instance segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic experiment (images and dataset.json).
    Synth(SynthArgs),
    /// Bootstrap and iterate the self-learning loop.
    Run(RunArgs),
    /// Run one loop per cell of a hyperparameter grid.
    Grid(GridArgs),
    /// Leave-one-image-out evaluation over the annotated images.
    Loio(LoioArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Restore a checkpoint and re-run the remaining iterations.
    Restore(RestoreArgs),
    /// Render report.svg and summary.txt from a run's metrics.csv.
    Report(ReportArgs),
    /// Check a dataset and/or a config file.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Coffee,
    CoffeeDistractors,
    Fruits,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "coffee")]
    preset: Preset,
    /// TOML experiment spec; replaces the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Human annotations kept on the bootstrap scenes.
    #[arg(long, default_value_t = 3)]
    annotations: u32,
    #[arg(long, default_value_t = 40)]
    training_images: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML file with loop settings and optional `dataset`/`images` paths.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `builtin` or `external:<command>`.
    #[arg(long)]
    detector: Option<String>,
    /// Dataset file; image paths resolve against `--images` or its directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LoopArgs {
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    loop_args: LoopArgs,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    iterations: Option<u32>,
    /// Bootstrap annotation counts; all annotations when absent.
    #[arg(long, value_delimiter = ',')]
    annotations: Vec<u32>,
    /// Defaults to the configured threshold.
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    /// Defaults to the configured epoch count.
    #[arg(long, value_delimiter = ',')]
    epochs: Vec<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LoioArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    loop_args: LoopArgs,
    #[arg(long, default_value_t = 1)]
    bootstrap_images: usize,
    #[arg(long, default_value_t = 1)]
    annotations_per_category: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground truth dataset; its testing partition, or every image if empty.
    #[arg(long)]
    gt: PathBuf,
    /// Dataset file with scored annotations, or a COCO results array.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    iou: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
}

#[derive(Debug, Args)]
struct RestoreArgs {
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    iteration: u32,
    /// Only verify the checkpoint.
    #[arg(long)]
    no_resume: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

/// Parses `argv` (program name first), dispatches and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_command_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Like [`run_command`], writing to the given streams.
pub fn run_command_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let CliError::Usage(_) = e {
                let _ = writeln!(err, "\nUsage: bootseg <COMMAND> [OPTIONS]; see `bootseg --help`");
            }
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Run(a) => run(a, out),
        Command::Grid(a) => grid(a, out),
        Command::Loio(a) => loio(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Restore(a) => restore(a, out),
        Command::Report(a) => report(a, out),
        Command::Validate(a) => validate(a, out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn say(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

/// Configuration and paths resolved from a config file and flags.
#[derive(Debug)]
struct Resolved {
    config: RunConfig,
    dataset: Option<PathBuf>,
    images: Option<PathBuf>,
}

impl ConfigArgs {
    /// Layers defaults, the config file, `--set` overrides and explicit flags,
    /// later layers winning.
    fn resolve(&self, loop_args: Option<&LoopArgs>) -> Result<Resolved, CliError> {
        let mut config = RunConfig::default();
        let mut dataset = None;
        let mut images = None;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let mut table: toml::Table = text
                .parse()
                .map_err(|e| LoopError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new(""));
            for key in PATH_KEYS {
                if let Some(v) = table.remove(key) {
                    let s = v
                        .as_str()
                        .ok_or_else(|| LoopError::Config(format!("{}: `{key}` must be a string", path.display())))?;
                    let p = base.join(s);
                    if key == "dataset" {
                        dataset = Some(p);
                    } else {
                        images = Some(p);
                    }
                }
            }
            config = table
                .try_into()
                .map_err(|e: toml::de::Error| LoopError::Config(format!("{}: {}", path.display(), e.message())))?;
        }
        let keys = RunConfig::keys();
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not KEY=VALUE")))?;
            let key = key.trim();
            if !keys.iter().any(|k| k == key) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
            config.set(key, value.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(d) = &self.detector {
            config.detector = d.clone();
        }
        if let Some(l) = loop_args {
            if let Some(n) = l.iterations {
                config.iterations = n;
            }
            if let Some(t) = l.threshold {
                config.threshold = t;
            }
            if let Some(e) = l.epochs {
                config.epochs = e;
            }
        }
        config.validate()?;
        Ok(Resolved {
            config,
            dataset: self.dataset.clone().or(dataset),
            images: self.images.clone().or(images),
        })
    }
}

impl Resolved {
    /// Loads the dataset and an image store rooted at `--images` or the
    /// dataset's directory.
    fn load(&self) -> Result<(AnnotatedDataset, Arc<ImageStore>), CliError> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| CliError::Usage("no dataset: pass --dataset or set `dataset` in the config file".into()))?;
        let dataset = load_coco(path)?;
        let root = match &self.images {
            Some(r) => r.clone(),
            None => path.parent().unwrap_or(Path::new("")).to_path_buf(),
        };
        Ok((dataset, Arc::new(ImageStore::new(root))))
    }
}

fn run_dir_or_env(flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    match std::env::var_os(RUN_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(CliError::Usage(format!(
            "no run directory: pass --run-dir or set {RUN_DIR_ENV}"
        ))),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            toml::from_str(&text).map_err(|e| SynthError::Spec(format!("{}: {e}", path.display())))?
        }
        None => match a.preset {
            Preset::Coffee => ExperimentSpec::coffee(a.annotations, a.training_images, a.seed),
            Preset::CoffeeDistractors => ExperimentSpec::coffee_distractors(a.annotations, a.training_images, a.seed),
            Preset::Fruits => ExperimentSpec::fruits(a.annotations, a.training_images, a.seed),
        },
    };
    let dataset = generate_experiment(&spec, &a.out)?;
    say(
        out,
        format!(
            "wrote {} ({} images, {} annotations)",
            a.out.join(DATASET_FILE).display(),
            dataset.images.len(),
            dataset.annotations.len()
        ),
    );
    Ok(())
}

fn summary_line(s: &RunSummary) -> String {
    let opt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
    format!(
        "iterations={} best_iteration={} ap75={} ar75={} n_detected={} n_gt={}",
        s.iterations,
        s.best_iteration.map_or("-".into(), |i| i.to_string()),
        opt(s.best_ap75),
        opt(s.best_ar75),
        s.final_n_detected.map_or("-".into(), |n| n.to_string()),
        s.n_gt.map_or("-".into(), |n| n.to_string()),
    )
}

fn write_report_if_possible(run_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    match render_report(run_dir) {
        Ok(files) => {
            say(out, format!("report: {}", files.svg.display()));
            Ok(())
        }
        Err(ReportError::MissingMetrics(_)) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

fn run(a: RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let resolved = a.config.resolve(Some(&a.loop_args))?;
    let run_dir = run_dir_or_env(&a.run_dir)?;
    let (dataset, store) = resolved.load()?;
    let state = run_loop(&resolved.config, dataset, store, Some(&run_dir))?;
    say(out, summary_line(&RunSummary::from_history(&state.history)));
    write_report_if_possible(&run_dir, out)
}

fn grid(a: GridArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let loop_args = LoopArgs {
        iterations: a.iterations,
        threshold: None,
        epochs: None,
    };
    let resolved = a.config.resolve(Some(&loop_args))?;
    let out_dir = run_dir_or_env(&a.out)?;
    let (dataset, store) = resolved.load()?;
    let spec = GridSpec {
        annotations: (!a.annotations.is_empty()).then_some(a.annotations),
        thresholds: if a.thresholds.is_empty() {
            vec![resolved.config.threshold]
        } else {
            a.thresholds
        },
        epochs: if a.epochs.is_empty() {
            vec![resolved.config.epochs]
        } else {
            a.epochs
        },
    };
    let rows = grid_search(&resolved.config, &spec, &dataset, store, &out_dir)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    say(
        out,
        format!(
            "{} cells ({failed} failed) -> {}",
            rows.len(),
            out_dir.join(GRID_FILE).display()
        ),
    );
    Ok(())
}

fn loio(a: LoioArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let resolved = a.config.resolve(Some(&a.loop_args))?;
    let out_dir = run_dir_or_env(&a.out)?;
    let (dataset, store) = resolved.load()?;
    let spec = LoioSpec {
        bootstrap_images: a.bootstrap_images,
        annotations_per_category: a.annotations_per_category,
    };
    let rows = loio_eval(&resolved.config, &spec, &dataset, store, &out_dir)?;
    say(
        out,
        format!("{} holdouts -> {}", rows.len(), out_dir.join(LOIO_FILE).display()),
    );
    Ok(())
}

/// Reads predictions from a dataset file or a COCO results array of
/// `{image_id, category_id, segmentation, score}` objects.
fn load_predictions(path: &Path, gt: &AnnotatedDataset) -> Result<Vec<Detection>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Parse(e.to_string()))?;
    let dataset = match value {
        serde_json::Value::Array(results) => {
            let annotations: Vec<serde_json::Value> = results
                .into_iter()
                .enumerate()
                .map(|(i, mut r)| {
                    if let Some(obj) = r.as_object_mut() {
                        let score = obj.remove("score").unwrap_or(serde_json::Value::from(1.0));
                        obj.insert("confidence".into(), score);
                        obj.entry("id").or_insert(serde_json::Value::from(i as u64 + 1));
                    }
                    r
                })
                .collect();
            let doc = serde_json::json!({
                "images": gt.images.iter().map(|im| serde_json::json!({
                    "id": im.id, "width": im.width, "height": im.height, "file_name": im.file_path,
                })).collect::<Vec<_>>(),
                "categories": gt.categories.iter().map(|c| serde_json::json!({"id": c.id, "name": c.name})).collect::<Vec<_>>(),
                "annotations": annotations,
            });
            parse_coco(&doc.to_string(), LoadOptions::default())?
        }
        _ => parse_coco(&text, LoadOptions::default())?,
    };
    Ok(dataset.annotations.iter().map(|a| a.as_detection()).collect())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let params = EvalParams {
        eval_iou: a.iou,
        nms_iou: a.nms_iou,
        max_dets_per_image: a.max_dets,
    };
    if !(params.eval_iou > 0.0 && params.eval_iou <= 1.0)
        || !(0.0..=1.0).contains(&params.nms_iou)
        || params.max_dets_per_image == 0
    {
        return Err(CliError::Usage(
            "--iou must lie in (0, 1], --nms-iou in [0, 1], --max-dets ≥ 1".into(),
        ));
    }
    let mut gt = load_coco(&a.gt)?;
    if gt.partitions.get(Partition::Testing).is_empty() {
        gt.partitions.testing = gt.images.iter().map(|im| im.id).collect::<BTreeSet<_>>();
    }
    let detections = load_predictions(&a.pred, &gt)?;
    let m = evaluate_dataset(&gt, &detections, &params, 0)?;
    say(out, format!("ap75={:?} ar75={:?}", m.ap75, m.ar75));
    Ok(())
}

fn restore(a: RestoreArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let run_dir = run_dir_or_env(&a.run_dir)?;
    let mut state = restore_run(&run_dir, a.iteration)?;
    say(
        out,
        format!("restored iteration {} of {}", a.iteration, run_dir.display()),
    );
    if a.no_resume {
        return Ok(());
    }
    continue_run(&mut state)?;
    say(out, summary_line(&RunSummary::from_history(&state.history)));
    write_report_if_possible(&run_dir, out)
}

fn report(a: ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let run_dir = run_dir_or_env(&a.run_dir)?;
    let files = render_report(&run_dir)?;
    say(
        out,
        format!("wrote {} and {}", files.svg.display(), files.summary.display()),
    );
    Ok(())
}

fn validate(a: ValidateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.config.config.is_none() && a.config.dataset.is_none() {
        return Err(CliError::Usage("validate needs --dataset and/or --config".into()));
    }
    let resolved = a.config.resolve(None)?;
    say(
        out,
        format!(
            "config ok (detector {}, threshold {})",
            resolved.config.detector, resolved.config.threshold
        ),
    );
    if resolved.dataset.is_some() {
        let (dataset, _) = resolved.load()?;
        let p = &dataset.partitions;
        say(
            out,
            format!(
                "dataset ok: {} images ({} bootstrapping, {} training, {} testing), {} annotations, {} categories",
                dataset.images.len(),
                p.bootstrapping.len(),
                p.training.len(),
                p.testing.len(),
                dataset.annotations.len(),
                dataset.categories.len()
            ),
        );
    }
    Ok(())
}
