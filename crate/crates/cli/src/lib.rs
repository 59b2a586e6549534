//! `mcl`: scan sensor configurations, train a single configuration, run the
//! surrogate-guided search and analyse results tables.
//!
//! Everything goes through [`dispatch`], which the binary and the tests
//! share. Results go to files and the summary line; progress goes to stderr
//! as one JSON object per line.

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use mcl_core::model::save_checkpoint;
use mcl_core::optim::{joint_or_default, reconstruction_or_default};
use mcl_core::search::{read_results_file, write_results_csv, write_series_csv, Report};
use mcl_core::{
    build_report, evaluate, full_evaluate, init_reconstruction, init_task_head, load_dataset,
    make_synthetic, rank_by_mse, save_dataset, surrogate_scan, train_joint, ConfigGrid,
    ConfigPoint, EvalRecord, Fixture, HeadConfig, LabeledDataset, MclModel, OptimizerConfig,
    SearchOptions, SplitPart, SyntheticSpec,
};

pub const RESULTS_NAME: &str = "results.csv";
pub const META_NAME: &str = "run_meta.json";
pub const CE_VS_MSE_NAME: &str = "ce_vs_mse.csv";
pub const CE_VS_RATE_NAME: &str = "ce_vs_rate.csv";
pub const CORRELATION_NAME: &str = "correlation.json";
pub const MODEL_NAME: &str = "model.mclm";
pub const TRAIN_NAME: &str = "train.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mcl_core::Error),

    #[error("{path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What a command did: its exit code, the files it wrote and a summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandOutcome {
    pub code: i32,
    pub paths: Vec<PathBuf>,
    pub summary: String,
}

impl CommandOutcome {
    fn ok(paths: Vec<PathBuf>, summary: String) -> Self {
        CommandOutcome {
            code: 0,
            paths,
            summary,
        }
    }

    fn failed(code: i32, summary: String) -> Self {
        CommandOutcome {
            code,
            paths: Vec::new(),
            summary,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mcl", version, about = "Multilinear compressive learning and sensor-configuration search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset described by a run config.
    Synth(RunArgs),
    /// Initialization-MSE scan over the configuration grid.
    Scan(RunArgs),
    /// Reconstruction init, head pretraining and joint training for one configuration.
    Train(RunArgs),
    /// Scan, rank by MSE, then fully evaluate the top-k configurations.
    Search(RunArgs),
    /// Correlation of classification error with MSE and compression rate.
    Correlate(TableArgs),
    /// Plot series (CE vs MSE, CE vs compression rate) as CSV.
    Report(TableArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds (overrides the config).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Number of configurations to fully evaluate (search only).
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Fill the runtime_s column of the results table.
    #[arg(long)]
    pub timings: bool,
    /// Suppress progress records on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    /// Built-in results table.
    #[arg(long, conflicts_with = "results", required_unless_present = "results")]
    pub fixture: Option<Fixture>,
    /// Results CSV written by `scan` or `search`.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Correlate every record instead of seed averages.
    #[arg(long)]
    pub per_seed: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A JSON run description. Exactly one of `dataset` and `synthetic` must
/// be set; relative paths are resolved against the config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub grid: Option<ConfigGrid>,
    /// Configuration for `train`.
    #[serde(default)]
    pub config: Option<ConfigPoint>,
    #[serde(default = "OptimizerConfig::reconstruction", deserialize_with = "reconstruction_or_default")]
    pub init: OptimizerConfig,
    #[serde(default = "OptimizerConfig::joint", deserialize_with = "joint_or_default")]
    pub joint: OptimizerConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub mse_split: Option<SplitPart>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = if path == "." {
                e.inner().to_string()
            } else {
                format!("field `{path}`: {}", e.inner())
            };
            CliError::Config {
                path: origin.to_path_buf(),
                msg,
            }
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        if let Some(d) = cfg.dataset.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if let Some(o) = cfg.out.as_mut() {
            if o.is_relative() {
                *o = base.join(&*o);
            }
        }
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        RunConfig::parse(&text, path)
    }

    fn validate(&self, origin: &Path) -> CliResult<()> {
        let bad = |msg: String| CliError::Config {
            path: origin.to_path_buf(),
            msg,
        };
        if self.dataset.is_some() == self.synthetic.is_some() {
            return Err(bad("exactly one of `dataset` and `synthetic` must be set".into()));
        }
        if self.seeds.is_empty() {
            return Err(bad("field `seeds`: at least one seed is required".into()));
        }
        self.init
            .validate()
            .map_err(|e| bad(format!("field `init`: {e}")))?;
        self.joint
            .validate()
            .map_err(|e| bad(format!("field `joint`: {e}")))?;
        if let Some(s) = &self.synthetic {
            s.validate().map_err(|e| bad(format!("field `synthetic`: {e}")))?;
        }
        Ok(())
    }

    fn search_options(&self, dataset_name: String) -> SearchOptions {
        SearchOptions {
            init: self.init.clone(),
            joint: self.joint.clone(),
            head: self.head,
            seeds: self.seeds.clone(),
            mse_split: self.mse_split.unwrap_or(SplitPart::Test),
            dataset_name,
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            return CommandOutcome::failed(code, e.render().to_string());
        }
    };
    match run(cli) {
        Ok(o) => o,
        Err(e) => CommandOutcome::failed(1, format!("error: {e}")),
    }
}

fn run(cli: Cli) -> CliResult<CommandOutcome> {
    match cli.command {
        Command::Synth(a) => with_jobs(a.jobs, || synth(&a)),
        Command::Scan(a) => with_jobs(a.jobs, || scan(&a)),
        Command::Train(a) => with_jobs(a.jobs, || train(&a)),
        Command::Search(a) => with_jobs(a.jobs, || search(&a)),
        Command::Correlate(a) => correlate(&a),
        Command::Report(a) => report(&a),
    }
}

fn with_jobs<F>(jobs: Option<usize>, f: F) -> CliResult<CommandOutcome>
where
    F: FnOnce() -> CliResult<CommandOutcome> + Send,
{
    match jobs {
        None => f(),
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))?
            .install(f),
    }
}

struct Progress {
    quiet: bool,
}

impl Progress {
    fn emit(&self, v: serde_json::Value) {
        if !self.quiet {
            eprintln!("{v}");
        }
    }
}

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
    name: String,
    progress: Progress,
}

fn prepare(a: &RunArgs) -> CliResult<Prepared> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = &a.seeds {
        if s.is_empty() {
            return Err(CliError::Usage("--seeds needs at least one value".into()));
        }
        cfg.seeds = s.clone();
    }
    if a.top_k.is_some() {
        cfg.top_k = a.top_k;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out`".into()))?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let name = cfg.name.clone().unwrap_or_else(|| match &cfg.dataset {
        Some(p) => p
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        None => "synthetic".into(),
    });
    Ok(Prepared {
        cfg,
        out,
        name,
        progress: Progress { quiet: a.quiet },
    })
}

fn load_data(cfg: &RunConfig, progress: &Progress) -> CliResult<LabeledDataset> {
    let mut ds = match (&cfg.dataset, &cfg.synthetic) {
        (Some(p), _) => load_dataset(p)?,
        (None, Some(s)) => make_synthetic(s)?,
        (None, None) => unreachable!("validated"),
    };
    ds.ensure_split(0)?;
    progress.emit(json!({
        "event": "dataset",
        "samples": ds.len(),
        "classes": ds.class_count(),
        "shape": ds.shape().map(|s| s.to_string()),
        "train": ds.indices(SplitPart::Train).len(),
        "val": ds.indices(SplitPart::Val).len(),
        "test": ds.indices(SplitPart::Test).len(),
    }));
    Ok(ds)
}

fn require_grid(cfg: &RunConfig, origin: &Path) -> CliResult<ConfigGrid> {
    cfg.grid.clone().ok_or_else(|| CliError::Config {
        path: origin.to_path_buf(),
        msg: "field `grid` is required for this command".into(),
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_meta(
    out: &Path,
    command: &str,
    started: u64,
    clock: Instant,
    records: &[EvalRecord],
) -> CliResult<PathBuf> {
    let runs: Vec<_> = records
        .iter()
        .map(|r| {
            json!({
                "I": r.config.input.to_string(),
                "M": r.config.measurements.to_string(),
                "seed": r.seed,
                "runtime_s": r.runtime_s,
            })
        })
        .collect();
    let meta = json!({
        "command": command,
        "started_unix_s": started,
        "elapsed_s": clock.elapsed().as_secs_f64(),
        "workers": rayon::current_num_threads(),
        "runs": runs,
    });
    let path = out.join(META_NAME);
    let text = serde_json::to_string_pretty(&meta).expect("json values serialize");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

fn write_results(out: &Path, records: &[EvalRecord], timings: bool) -> CliResult<PathBuf> {
    let path = out.join(RESULTS_NAME);
    let f = fs::File::create(&path).map_err(io_err(&path))?;
    write_results_csv(io::BufWriter::new(f), records, timings)?;
    Ok(path)
}

fn write_series(out: &Path, rep: &Report) -> CliResult<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (name, pts) in [(CE_VS_MSE_NAME, &rep.ce_vs_mse), (CE_VS_RATE_NAME, &rep.ce_vs_rate)] {
        let path = out.join(name);
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        write_series_csv(io::BufWriter::new(f), pts)?;
        paths.push(path);
    }
    Ok(paths)
}

fn write_correlation(out: &Path, rep: &Report) -> CliResult<PathBuf> {
    let path = out.join(CORRELATION_NAME);
    let text = serde_json::to_string_pretty(&rep.correlation).expect("report serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

fn correlation_lines(rep: &Report) -> String {
    let c = &rep.correlation;
    format!(
        "pearson_ce_mse = {:.4}\npearson_ce_rate = {:.4}\nspearman_ce_mse = {:.4}\nn = {}",
        c.pearson_ce_mse, c.pearson_ce_rate, c.spearman_ce_mse, c.n
    )
}

fn synth(a: &RunArgs) -> CliResult<CommandOutcome> {
    let p = prepare(a)?;
    let spec = p.cfg.synthetic.as_ref().ok_or_else(|| CliError::Config {
        path: a.config.clone(),
        msg: "field `synthetic` is required for synth".into(),
    })?;
    let ds = make_synthetic(spec)?;
    save_dataset(&ds, &p.out)?;
    let manifest = p.out.join(mcl_core::data::MANIFEST_NAME);
    let split = p.out.join(mcl_core::data::SPLIT_NAME);
    Ok(CommandOutcome::ok(
        vec![manifest, split],
        format!("wrote {} samples to {}", ds.len(), p.out.display()),
    ))
}

fn scan(a: &RunArgs) -> CliResult<CommandOutcome> {
    let (started, clock) = (unix_now(), Instant::now());
    let p = prepare(a)?;
    let grid = require_grid(&p.cfg, &a.config)?;
    let ds = load_data(&p.cfg, &p.progress)?;
    let opts = p.cfg.search_options(p.name.clone());
    let records = surrogate_scan(&ds, &grid, &opts)?;
    for r in &records {
        p.progress.emit(json!({
            "event": "scan",
            "I": r.config.input.to_string(),
            "M": r.config.measurements.to_string(),
            "seed": r.seed,
            "init_mse": r.init_mse,
        }));
    }
    let results = write_results(&p.out, &records, a.timings)?;
    let meta = write_meta(&p.out, "scan", started, clock, &records)?;
    let best = &rank_by_mse(&records)[0];
    Ok(CommandOutcome::ok(
        vec![results, meta],
        format!(
            "scanned {} runs; lowest init_mse {:.6} at {} (seed {})",
            records.len(),
            best.init_mse,
            best.config,
            best.seed
        ),
    ))
}

fn search(a: &RunArgs) -> CliResult<CommandOutcome> {
    let (started, clock) = (unix_now(), Instant::now());
    let p = prepare(a)?;
    let grid = require_grid(&p.cfg, &a.config)?;
    let ds = load_data(&p.cfg, &p.progress)?;
    let opts = p.cfg.search_options(p.name.clone());
    let scanned = surrogate_scan(&ds, &grid, &opts)?;
    p.progress.emit(json!({"event": "scan_done", "runs": scanned.len()}));
    let records = full_evaluate(&ds, &scanned, &opts, p.cfg.top_k)?;
    for r in records.iter().filter(|r| r.ce.is_some()) {
        p.progress.emit(json!({
            "event": "evaluated",
            "I": r.config.input.to_string(),
            "M": r.config.measurements.to_string(),
            "seed": r.seed,
            "init_mse": r.init_mse,
            "accuracy": r.accuracy,
        }));
    }
    let mut paths = vec![write_results(&p.out, &records, a.timings)?];
    let summary = match build_report(&records, false) {
        Ok(rep) => {
            paths.extend(write_series(&p.out, &rep)?);
            paths.push(write_correlation(&p.out, &rep)?);
            correlation_lines(&rep)
        }
        Err(e) => {
            p.progress.emit(json!({"event": "no_report", "reason": e.to_string()}));
            format!("evaluated {} runs; no correlation report: {e}", records.iter().filter(|r| r.ce.is_some()).count())
        }
    };
    paths.push(write_meta(&p.out, "search", started, clock, &records)?);
    Ok(CommandOutcome::ok(paths, summary))
}

fn train(a: &RunArgs) -> CliResult<CommandOutcome> {
    let (started, clock) = (unix_now(), Instant::now());
    let p = prepare(a)?;
    let config = match (&p.cfg.config, &p.cfg.grid) {
        (Some(c), _) => ConfigPoint::new(c.input.clone(), c.measurements.clone())?,
        (None, Some(g)) => {
            let pts = mcl_core::enumerate_grid(g)?;
            if pts.len() != 1 {
                return Err(CliError::Config {
                    path: a.config.clone(),
                    msg: format!("field `config` is required when the grid has {} points", pts.len()),
                });
            }
            pts[0].clone()
        }
        (None, None) => {
            return Err(CliError::Config {
                path: a.config.clone(),
                msg: "field `config` is required for train".into(),
            })
        }
    };
    let seed = p.cfg.seeds[0];
    let ds = load_data(&p.cfg, &p.progress)?;
    let (train_v, val_v, test_v) = (
        ds.view(SplitPart::Train),
        ds.view(SplitPart::Val),
        ds.view(SplitPart::Test),
    );

    let init = init_reconstruction(&train_v, &config, &p.cfg.init.clone().with_seed(seed))?;
    for (i, l) in init.history.iter().enumerate() {
        p.progress.emit(json!({"event": "epoch", "stage": "init", "epoch": i + 1, "mse": l}));
    }
    let head = init_task_head(&train_v, &p.cfg.joint.clone().with_seed(seed), p.cfg.head)?;
    let head_acc = mcl_core::model::head_accuracy(&head, &test_v)?;
    p.progress.emit(json!({"event": "head", "test_accuracy": head_acc}));
    let model = MclModel::new(init.cs, init.fs, head, config.clone())?;
    let init_eval = evaluate(&model, &test_v)?;
    let joint = train_joint(&model, &train_v, &val_v, &p.cfg.joint.clone().with_seed(seed))?;
    for (i, l) in joint.train_loss.iter().enumerate() {
        p.progress.emit(json!({
            "event": "epoch",
            "stage": "joint",
            "epoch": i + 1,
            "loss": l,
            "val_accuracy": joint.val_accuracy[i + 1],
        }));
    }
    let test = evaluate(&joint.model, &test_v)?;

    let model_path = p.out.join(MODEL_NAME);
    save_checkpoint(&joint.model, &model_path)?;
    let metrics = json!({
        "dataset": p.name,
        "I": config.input.to_string(),
        "M": config.measurements.to_string(),
        "compression_rate": config.compression_rate(),
        "seed": seed,
        "init_mse_history": init.history,
        "init_test_mse": init_eval.mse,
        "head_test_accuracy": head_acc,
        "best_epoch": joint.best_epoch,
        "val_accuracy": joint.val_accuracy,
        "train_loss": joint.train_loss,
        "test_accuracy": test.accuracy,
        "test_ce": test.ce,
        "test_mse": test.mse,
    });
    let metrics_path = p.out.join(TRAIN_NAME);
    let text = serde_json::to_string_pretty(&metrics).expect("json values serialize");
    fs::write(&metrics_path, text + "\n").map_err(io_err(&metrics_path))?;
    let meta = write_meta(&p.out, "train", started, clock, &[])?;
    Ok(CommandOutcome::ok(
        vec![model_path, metrics_path, meta],
        format!(
            "{config}: init mse {:.6}, test accuracy {:.4} (best epoch {})",
            init_eval.mse, test.accuracy, joint.best_epoch
        ),
    ))
}

fn table(a: &TableArgs) -> CliResult<Vec<EvalRecord>> {
    match (&a.fixture, &a.results) {
        (Some(f), _) => Ok(f.records()),
        (None, Some(p)) => Ok(read_results_file(p)?),
        (None, None) => Err(CliError::Usage("pass --fixture or --results".into())),
    }
}

fn correlate(a: &TableArgs) -> CliResult<CommandOutcome> {
    let rep = build_report(&table(a)?, a.per_seed)?;
    let mut paths = Vec::new();
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(io_err(out))?;
        paths.push(write_correlation(out, &rep)?);
    }
    Ok(CommandOutcome::ok(paths, correlation_lines(&rep)))
}

fn report(a: &TableArgs) -> CliResult<CommandOutcome> {
    let rep = build_report(&table(a)?, a.per_seed)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let paths = write_series(&out, &rep)?;
    Ok(CommandOutcome::ok(
        paths,
        format!("wrote {} points per series to {}", rep.correlation.n, out.display()),
    ))
}
