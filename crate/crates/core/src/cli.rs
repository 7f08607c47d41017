//! Command-line driver. Each `cmd_*` function is usable from code; [`run`]
//! parses arguments and maps errors to exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_events, pass_through_events, read_events, write_events, PseudoEvent};
use crate::config::{describe_defaults, RunConfig};
use crate::dataset::{assign_splits, load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::forward;
use crate::params::{load_checkpoint_for, save_checkpoint, ModelParams};
use crate::synth::{generate_to, read_spec, GroundTruth};
use crate::trainer::{evaluate_split, train_with, History};
use crate::windowing::{read_windows, segment_all, write_windows, DatasetKind, WindowSequence};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.csv";
pub const EVENTS: &str = "events.json";
pub const WINDOWS: &str = "windows.json";
pub const CONFIG: &str = "config.json";
pub const METRICS: &str = "metrics.json";
pub const DATASET_INFO: &str = "dataset.json";

/// 0 success, 1 runtime or numeric failure, 2 configuration error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        2
    } else {
        1
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Refuses a non-empty `dir` unless `force`, in which case its contents go.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::InvalidArgument(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads `config` (if any) on top of the defaults, then applies `key=value`
/// overrides in order.
pub fn load_config(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.merge_file(path)?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Pseudo-events for `ds` under `cfg`: grouping by a manifest field when
/// `cluster.group_key` is set, agglomerative clustering otherwise.
pub fn build_events(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<PseudoEvent>> {
    match &cfg.group_key {
        Some(key) => pass_through_events(ds, key),
        None => cluster_events(ds, cfg.num_clusters_for(ds.len()), cfg.linkage),
    }
}

pub fn build_windows(ds: &Dataset, events: &[PseudoEvent], cfg: &RunConfig) -> Result<Vec<WindowSequence>> {
    let (span, stride) = cfg.window()?;
    segment_all(events, ds, span, stride)
}

/// A dataset with splits assigned plus its events and windows.
pub struct Prepared {
    pub dataset: Dataset,
    pub events: Vec<PseudoEvent>,
    pub windows: Vec<WindowSequence>,
}

pub fn prepare(data: &Path, cfg: &RunConfig) -> Result<Prepared> {
    let ds = load_dataset(data)?;
    let dataset = assign_splits(ds, cfg.split, cfg.seed)?;
    let events = build_events(&dataset, cfg)?;
    let windows = build_windows(&dataset, &events, cfg)?;
    Ok(Prepared { dataset, events, windows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub fingerprint: String,
    pub n_posts: usize,
    pub d_text: usize,
    pub d_img: usize,
}

impl DatasetInfo {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            fingerprint: ds.fingerprint(),
            n_posts: ds.len(),
            d_text: ds.d_text,
            d_img: ds.d_img,
        }
    }
}

pub fn cmd_generate(spec: &Path, out: &Path, force: bool) -> Result<GroundTruth> {
    let spec = read_spec(spec)?;
    spec.validate()?;
    prepare_out_dir(out, force)?;
    generate_to(&spec, out)
}

pub fn cmd_cluster(data: &Path, cfg: &RunConfig, out: &Path) -> Result<Vec<PseudoEvent>> {
    let ds = load_dataset(data)?;
    let events = build_events(&ds, cfg)?;
    write_events(&events, out)?;
    Ok(events)
}

pub fn cmd_window(data: &Path, events: &Path, cfg: &RunConfig, out: &Path) -> Result<Vec<WindowSequence>> {
    let ds = load_dataset(data)?;
    let events = read_events(events)?;
    let windows = build_windows(&ds, &events, cfg)?;
    write_windows(&windows, out)?;
    Ok(windows)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub history: History,
    pub val: EvalResult,
}

fn write_structure(out: &Path, prepared: &Prepared, cfg: &RunConfig) -> Result<()> {
    write_events(&prepared.events, out.join(EVENTS))?;
    write_windows(&prepared.windows, out.join(WINDOWS))?;
    fs::write(out.join(CONFIG), cfg.to_json() + "\n").map_err(|e| Error::io(out.join(CONFIG), e))?;
    write_json(&DatasetInfo::of(&prepared.dataset), &out.join(DATASET_INFO))
}

/// Trains on prepared data and writes every run artifact into `out`.
fn train_prepared(prepared: &Prepared, cfg: &RunConfig, out: &Path, verbose: bool) -> Result<TrainRun> {
    let ds = &prepared.dataset;
    let tc = cfg.train_config(ds.d_text, ds.d_img)?;
    write_structure(out, prepared, cfg)?;
    let init = ModelParams::init(tc.dims, cfg.seed)?;
    let outcome = train_with(ds, &prepared.events, &prepared.windows, init, &tc, |r| {
        if verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  ce {:.5}  tc {:.5}  val_f1 {}",
                r.epoch,
                r.total,
                r.ce,
                r.tc,
                r.val_f1.map_or("-".into(), |f| format!("{f:.4}"))
            );
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::Diverged { epoch, reason, last_good }) => {
            save_checkpoint(&last_good, out.join(CHECKPOINT))?;
            return Err(Error::Diverged { epoch, reason, last_good });
        }
        Err(e) => return Err(e),
    };
    save_checkpoint(&outcome.params, out.join(CHECKPOINT))?;
    outcome.history.write_csv(out.join(HISTORY))?;
    let fp = forward(ds, &prepared.events, &prepared.windows, &outcome.params, &tc.model, false)?;
    let val = evaluate_split(ds, fp.probabilities(), Some(Split::Val), tc.threshold)?;
    write_json(&val, &out.join(METRICS))?;
    Ok(TrainRun { params: outcome.params, history: outcome.history, val })
}

pub fn cmd_train(data: &Path, cfg: &RunConfig, out: &Path, force: bool) -> Result<TrainRun> {
    cfg.validate()?;
    let prepared = prepare(data, cfg)?;
    prepare_out_dir(out, force)?;
    train_prepared(&prepared, cfg, out, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

impl EvalSplit {
    fn split(self) -> Option<Split> {
        match self {
            EvalSplit::Train => Some(Split::Train),
            EvalSplit::Val => Some(Split::Val),
            EvalSplit::Test => Some(Split::Test),
            EvalSplit::All => None,
        }
    }
}

/// Run configuration stored beside a checkpoint, or the defaults.
pub fn run_config_for(checkpoint: &Path, overrides: &[String]) -> Result<RunConfig> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let stored = dir.join(CONFIG);
    let config = stored.exists().then_some(stored.as_path());
    load_config(config, overrides)
}

/// Prepares `data` for inference with a checkpoint. Events and windows
/// persisted next to the checkpoint are reused when they were computed on
/// this very dataset.
fn prepare_for_checkpoint(data: &Path, checkpoint: &Path, cfg: &RunConfig) -> Result<Prepared> {
    let ds = assign_splits(load_dataset(data)?, cfg.split, cfg.seed)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let info_path = dir.join(DATASET_INFO);
    let reuse = info_path.exists()
        && dir.join(EVENTS).exists()
        && dir.join(WINDOWS).exists()
        && read_json::<DatasetInfo>(&info_path)? == DatasetInfo::of(&ds);
    let (events, windows) = if reuse {
        (read_events(dir.join(EVENTS))?, read_windows(dir.join(WINDOWS))?)
    } else {
        let events = build_events(&ds, cfg)?;
        let windows = build_windows(&ds, &events, cfg)?;
        (events, windows)
    };
    Ok(Prepared { dataset: ds, events, windows })
}

fn probabilities(prepared: &Prepared, params: &ModelParams, cfg: &RunConfig) -> Result<Vec<Option<f64>>> {
    let ds = &prepared.dataset;
    let tc = cfg.train_config(ds.d_text, ds.d_img)?;
    let fp = forward(ds, &prepared.events, &prepared.windows, params, &tc.model, false)?;
    Ok(fp.probabilities().to_vec())
}

pub fn cmd_eval(data: &Path, checkpoint: &Path, split: EvalSplit, cfg: &RunConfig, out: Option<&Path>) -> Result<EvalResult> {
    let prepared = prepare_for_checkpoint(data, checkpoint, cfg)?;
    let ds = &prepared.dataset;
    let params = load_checkpoint_for(checkpoint, &cfg.dims(ds.d_text, ds.d_img))?;
    let probs = probabilities(&prepared, &params, cfg)?;
    let result = evaluate_split(ds, &probs, split.split(), cfg.threshold)?;
    if let Some(path) = out {
        write_json(&result, path)?;
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probability: f64,
    pub predicted: u8,
}

/// Probabilities for every post of `data` covered by a window, written as CSV.
pub fn cmd_predict(data: &Path, checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<Vec<Prediction>> {
    let prepared = prepare_for_checkpoint(data, checkpoint, cfg)?;
    let ds = &prepared.dataset;
    let params = load_checkpoint_for(checkpoint, &cfg.dims(ds.d_text, ds.d_img))?;
    let probs = probabilities(&prepared, &params, cfg)?;
    let preds: Vec<Prediction> = ds
        .posts
        .iter()
        .zip(probs)
        .filter_map(|(post, p)| {
            p.map(|p| Prediction {
                id: post.id.clone(),
                probability: p,
                predicted: u8::from(p >= cfg.threshold),
            })
        })
        .collect();
    let mut w = csv::Writer::from_path(out).map_err(|e| Error::format(out.display().to_string(), e.to_string()))?;
    for p in &preds {
        w.serialize(p).map_err(|e| Error::format(out.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalReport {
    pub train_data: String,
    pub test_data: String,
    /// Validation metrics on the training dataset.
    pub source_val: EvalResult,
    /// Metrics over every covered post of the test dataset.
    pub transfer: EvalResult,
}

/// Trains on `train_data` with the full protocol and evaluates on all of
/// `test_data` without further updates. The test dataset is clustered and
/// windowed afresh, using `test_preset` for its windows when given.
pub fn cmd_crosseval(
    train_data: &Path,
    test_data: &Path,
    cfg: &RunConfig,
    test_preset: Option<DatasetKind>,
    out: &Path,
    force: bool,
) -> Result<CrossEvalReport> {
    cfg.validate()?;
    let source = prepare(train_data, cfg)?;
    let target_ds = load_dataset(test_data)?;
    if (target_ds.d_text, target_ds.d_img) != (source.dataset.d_text, source.dataset.d_img) {
        return Err(Error::Dataset(format!(
            "embedding dimensions differ: training data has d_text={}, d_img={}; test data has d_text={}, d_img={}",
            source.dataset.d_text, source.dataset.d_img, target_ds.d_text, target_ds.d_img
        )));
    }
    let mut target_cfg = cfg.clone();
    if let Some(p) = test_preset {
        target_cfg.window_preset = p;
        target_cfg.span_secs = None;
        target_cfg.stride_secs = None;
    }
    target_cfg.validate()?;
    prepare_out_dir(out, force)?;
    let run = train_prepared(&source, cfg, out, false)?;

    let events = build_events(&target_ds, &target_cfg)?;
    let windows = build_windows(&target_ds, &events, &target_cfg)?;
    let target = Prepared { dataset: target_ds, events, windows };
    let probs = probabilities(&target, &run.params, cfg)?;
    let transfer = evaluate_split(&target.dataset, &probs, None, cfg.threshold)?;
    let report = CrossEvalReport {
        train_data: train_data.display().to_string(),
        test_data: test_data.display().to_string(),
        source_val: run.val,
        transfer,
    };
    write_json(&report, &out.join(METRICS))?;
    Ok(report)
}

/// Caps the rayon pool at `ECATCH_THREADS` workers when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ECATCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::config("ECATCH_THREADS", format!("expected a positive integer, got `{raw}`")))?;
    if n == 0 {
        return Err(Error::config("ECATCH_THREADS", "must be positive"));
    }
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "ecatch", version, about = "Event-centric multimodal misinformation detection", after_long_help = describe_defaults())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset described by a spec file.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Group posts into pseudo-events and write events.json.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Segment pseudo-events into overlapping windows.
    Window {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cluster, window and train; writes the checkpoint and run artifacts.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        force: bool,
        #[arg(long, short)]
        verbose: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        /// Where to write metrics.json; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write per-post probabilities as CSV.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on one dataset and evaluate on another without fine-tuning.
    Crosseval {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window preset of the test dataset; defaults to the training one.
        #[arg(long)]
        test_preset: Option<String>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the gradient oracle and every invariant check.
    Verify {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Where to write report.json.
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn config_from(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = args.set.clone();
    overrides.extend_from_slice(extra);
    load_config(args.config.as_deref(), &overrides)
}

fn dispatch(cli: Cli) -> Result<i32> {
    init_threads()?;
    match cli.command {
        Command::Generate { spec, out, force } => {
            let truth = cmd_generate(&spec, &out, force)?;
            eprintln!("wrote {} posts ({} positive) to {}", truth.event_of.len(), truth.n_positive, out.display());
        }
        Command::Cluster { data, out, config } => {
            let cfg = config_from(&config, &[])?;
            let events = cmd_cluster(&data, &cfg, &out)?;
            eprintln!("{} pseudo-events written to {}", events.len(), out.display());
        }
        Command::Window { data, events, out, config } => {
            let cfg = config_from(&config, &[])?;
            let windows = cmd_window(&data, &events, &cfg, &out)?;
            let total: usize = windows.iter().map(WindowSequence::len).sum();
            eprintln!("{total} windows over {} events written to {}", windows.len(), out.display());
        }
        Command::Train { data, out, epochs, force, verbose, config } => {
            let extra: Vec<String> = epochs.map(|e| format!("train.epochs={e}")).into_iter().collect();
            let cfg = config_from(&config, &extra)?;
            let prepared = prepare(&data, &cfg)?;
            prepare_out_dir(&out, force)?;
            let run = train_prepared(&prepared, &cfg, &out, verbose)?;
            print_json(&run.val);
        }
        Command::Eval { data, checkpoint, split, out, config } => {
            let cfg = match &config.config {
                Some(_) => config_from(&config, &[])?,
                None => run_config_for(&checkpoint, &config.set)?,
            };
            print_json(&cmd_eval(&data, &checkpoint, split, &cfg, out.as_deref())?);
        }
        Command::Predict { data, checkpoint, out, config } => {
            let cfg = match &config.config {
                Some(_) => config_from(&config, &[])?,
                None => run_config_for(&checkpoint, &config.set)?,
            };
            let preds = cmd_predict(&data, &checkpoint, &cfg, &out)?;
            eprintln!("{} predictions written to {}", preds.len(), out.display());
        }
        Command::Crosseval { train_data, test_data, out, test_preset, force, config } => {
            let cfg = config_from(&config, &[])?;
            let preset = test_preset.map(|p| p.parse::<DatasetKind>()).transpose()?;
            print_json(&cmd_crosseval(&train_data, &test_data, &cfg, preset, &out, force)?);
        }
        Command::Verify { seeds, report } => {
            let summary = crate::verify::run_all(&seeds);
            print!("{}", summary.table());
            summary.write_json(&report)?;
            if !summary.all_passed() {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
