//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or missed metric target, 2 usage
//! or configuration error, 3 numerical divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{format_table, run_suite, Fault, Suite, VerifyOptions};
use crate::bench::{bench_csv, run_bench, BenchConfig, BenchImpl};
use crate::config::{Override, RunConfig, TaskConfig, PRESETS};
use crate::error::{Error, Result};
use crate::tasks::{
    load_checkpoint, save_checkpoint, write_csv_sequences, write_metrics, Checkpoint, CheckpointMeta, SequenceDataset,
    Split,
};
use crate::train::{evaluate, fit_with, init_params, Evaluation, MetricRow};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

/// Echoed configuration inside a run directory.
pub const RUN_CONFIG_FILE: &str = "config.toml";
pub const RUN_METRICS_FILE: &str = "metrics.csv";
/// Parameters from the epoch with the best validation score.
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt.json";
/// Parameters and optimizer state after the last completed epoch.
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt.json";

#[derive(Debug, Parser)]
#[command(
    name = "unicornn",
    version,
    about = "Train, evaluate and verify undamped oscillator RNNs"
)]
pub struct Cli {
    /// Worker threads for batch parallelism [default: available cores]
    #[arg(
        long,
        global = true,
        env = "UNICORNN_THREADS",
        hide_env_values = true,
        value_name = "N"
    )]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics and checkpoints to the run directory
    Train(TrainArgs),
    /// Score a checkpoint on one split of its task
    Eval(EvalArgs),
    /// Run the numerical verification suites
    Verify(VerifyArgs),
    /// Time fused and step-by-step forward+backward passes
    Bench(BenchArgs),
    /// Generate a synthetic dataset as CSV
    GenData(GenDataArgs),
}

/// Configuration layers shared by `train` and `eval`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Named starting configuration, applied before --config
    #[arg(long, value_name = "NAME", value_parser = preset_names())]
    pub preset: Option<String>,

    /// Task kind; replaces the task section when it names a different kind
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,

    /// Dataset file for csv tasks (task.path)
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,

    /// Override one key, e.g. --set model.hidden=64 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    Lorenz96,
    NoisePadded,
    Csv,
}

impl TaskKind {
    fn as_str(self) -> &'static str {
        match self {
            TaskKind::Lorenz96 => "lorenz96",
            TaskKind::NoisePadded => "noise-padded",
            TaskKind::Csv => "csv",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Seed for initialization, shuffling and dropout masks
    #[arg(long)]
    pub seed: Option<u64>,

    /// Number of epochs (train.epochs)
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Learning rate (train.lr)
    #[arg(long)]
    pub lr: Option<f64>,

    /// Run directory (output.dir)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Print the merged configuration and exit without training
    #[arg(long)]
    pub dry_run: bool,

    /// Print one line per epoch to stderr
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Checkpoint to score; a config.toml next to it is used when --config is absent
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    /// Split to score
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,

    /// Exit with code 1 if the NRMSE exceeds this value
    #[arg(long, value_name = "X")]
    pub max_nrmse: Option<f64>,

    /// Exit with code 1 if the accuracy falls below this value
    #[arg(long, value_name = "X")]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Suite to run: all, inversion, volume, state-bounds, grad-bound, fd-match, vanishing-probe, scaling-probe
    #[arg(long, default_value = "all", value_name = "NAME")]
    pub suite: String,

    /// Seed of the random instances
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Corrupt the analytic gradients to confirm that fd-match can fail
    #[arg(long, value_enum, value_name = "FAULT")]
    pub inject_fault: Option<FaultArg>,

    /// Also write the records as JSON
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    CorruptBackward,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence lengths, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1000", value_name = "N")]
    pub steps: Vec<usize>,

    /// Hidden units per layer
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,

    /// Stacked layers
    #[arg(long, default_value_t = 2)]
    pub layers: usize,

    /// Sequences per batch
    #[arg(long, default_value_t = 128)]
    pub batch: usize,

    /// Input width
    #[arg(long, default_value_t = 1)]
    pub input_dim: usize,

    /// Timed passes per implementation
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,

    /// Untimed passes per implementation
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,

    /// Implementations, comma separated: fused, reconstructing, naive
    #[arg(
        long = "impl",
        value_delimiter = ',',
        default_value = "fused,naive",
        value_name = "NAME"
    )]
    pub impls: Vec<String>,

    /// Seed of the model and the batch
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Write the CSV here as well as to stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator
    #[arg(value_enum)]
    pub task: GenTask,

    /// Lorenz 96 forcing constant
    #[arg(long = "F", value_name = "F")]
    pub forcing: Option<f64>,

    /// Generator seed
    #[arg(long)]
    pub seed: Option<u64>,

    /// Override one generator key, e.g. --set seq_len=500 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Output CSV file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenTask {
    Lorenz96,
    NoisePadded,
}

fn preset_names() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(
        PRESETS
            .iter()
            .map(|p| clap::builder::PossibleValue::new(p.name).help(p.summary)),
    )
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
    Diverged,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => EXIT_OK,
            Outcome::CheckFailed => EXIT_CHECK_FAILED,
            Outcome::Diverged => EXIT_DIVERGED,
        }
    }
}

/// Exit code for an error that aborted a command.
pub fn error_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

/// Parses the process arguments, runs the command and maps the result to
/// an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(outcome) => outcome.code(),
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e)
        }
    };
    ExitCode::from(code)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A pool that already exists (e.g. when called twice in one process)
        // keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<Override>> {
    raw.iter().map(|s| s.parse()).collect()
}

fn resolve_config(args: &ConfigArgs, fallback_file: Option<&Path>, mut extra: Vec<Override>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(kind) = args.task {
        overrides.push(Override::new("task.kind", kind.as_str()));
    }
    if let Some(p) = &args.data {
        overrides.push(Override::new("task.path", p.display().to_string()));
    }
    overrides.extend(parse_overrides(&args.overrides)?);
    overrides.append(&mut extra);
    let file = args.config.as_deref().or(fallback_file);
    RunConfig::layered(args.preset.as_deref(), file, &overrides)
}

fn describe(e: &Evaluation) -> String {
    let mut parts = vec![format!("loss {:.4e}", e.loss)];
    if let Some(v) = e.nrmse {
        parts.push(format!("nrmse {v:.4e}"));
    }
    if let Some(v) = e.accuracy {
        parts.push(format!("accuracy {v:.4}"));
    }
    parts.join(", ")
}

fn eval_rows(e: &Evaluation, epoch: usize, split: Split, wall_time: f64) -> Vec<MetricRow> {
    let mut rows = vec![("loss", e.loss)];
    rows.extend(e.nrmse.map(|v| ("nrmse", v)));
    rows.extend(e.accuracy.map(|v| ("accuracy", v)));
    rows.into_iter()
        .map(|(metric, value)| MetricRow {
            epoch,
            split,
            metric: metric.to_string(),
            value,
            wall_time,
        })
        .collect()
}

fn metric_map(prefix: &str, e: &Evaluation) -> impl Iterator<Item = (String, f64)> {
    let mut out = vec![(format!("{prefix}_loss"), e.loss)];
    out.extend(e.nrmse.map(|v| (format!("{prefix}_nrmse"), v)));
    out.extend(e.accuracy.map(|v| (format!("{prefix}_accuracy"), v)));
    out.into_iter()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let mut extra = Vec::new();
    if let Some(s) = a.seed {
        extra.push(Override::new("train.seed", s as i64));
        extra.push(Override::new("model.init_seed", s as i64));
    }
    if let Some(e) = a.epochs {
        extra.push(Override::new("train.epochs", e as i64));
    }
    if let Some(lr) = a.lr {
        extra.push(Override::new("train.lr", lr));
    }
    if let Some(d) = &a.out {
        extra.push(Override::new("output.dir", d.display().to_string()));
    }
    let cfg = resolve_config(&a.config, None, extra)?;
    let echoed = cfg.to_toml_string()?;
    if a.dry_run {
        print!("{echoed}");
        return Ok(Outcome::Success);
    }
    let model_cfg = cfg.model_config()?;
    let [train, valid, test] = cfg.load_splits()?;

    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(RUN_CONFIG_FILE), &echoed)?;
    let metrics_path = dir.join(RUN_METRICS_FILE);
    match fs::remove_file(&metrics_path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(&metrics_path, e)),
    }

    let model = init_params(&model_cfg, cfg.model.init_seed)?;
    eprintln!(
        "training {} on {} ({} train, {} valid, {} test sequences), {} parameters",
        cfg.task.name(),
        dir.display(),
        train.len(),
        valid.len(),
        test.len(),
        model.param_count()
    );
    let epochs = cfg.train.epochs;
    let outcome = fit_with(model, &train, &valid, &cfg.train, |r| {
        if a.verbose {
            eprintln!(
                "epoch {}/{epochs}  train loss {:.4e}  valid {}{}  ({:.1} s)",
                r.epoch,
                r.train_loss,
                describe(&r.valid),
                if r.improved { " *" } else { "" },
                r.wall_time
            );
        }
    })?;

    let mut history = outcome.history.clone();
    let mut meta = CheckpointMeta {
        task: cfg.task.name().to_string(),
        epoch: outcome.best_epoch.unwrap_or(0),
        metrics: Default::default(),
    };
    if let Some(best_epoch) = outcome.best_epoch {
        let v = evaluate(&outcome.best, &valid, cfg.train.shard_size)?;
        let t = evaluate(&outcome.best, &test, cfg.train.shard_size)?;
        let wall_time = history.last().map_or(0.0, |r| r.wall_time);
        history.extend(eval_rows(&t, best_epoch, Split::Test, wall_time));
        meta.metrics
            .extend(metric_map("valid", &v).chain(metric_map("test", &t)));
        println!("best epoch {best_epoch}: valid {}; test {}", describe(&v), describe(&t));
    }
    if !history.is_empty() {
        write_metrics(&history, &metrics_path)?;
    }
    let mut best = Checkpoint::new(outcome.best);
    best.seed = cfg.train.seed;
    best.meta = meta.clone();
    save_checkpoint(&best, &dir.join(BEST_CHECKPOINT_FILE))?;
    let mut last = Checkpoint::new(outcome.last);
    last.seed = cfg.train.seed;
    last.optimizer = Some(outcome.optimizer);
    last.meta = CheckpointMeta {
        epoch: outcome.epochs_run,
        ..meta
    };
    save_checkpoint(&last, &dir.join(LAST_CHECKPOINT_FILE))?;

    match outcome.diverged {
        Some(msg) => {
            eprintln!("error: training diverged: {msg}");
            Ok(Outcome::Diverged)
        }
        None => Ok(Outcome::Success),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let sibling = a
        .checkpoint
        .parent()
        .map(|p| p.join(RUN_CONFIG_FILE))
        .filter(|p| p.is_file());
    let cfg = resolve_config(&a.config, sibling.as_deref(), Vec::new())?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    ckpt.check_against(&cfg.model_config()?)?;
    let ds: SequenceDataset = cfg.task.load()?.select(a.split.into())?;
    let e = evaluate(&ckpt.model, &ds, cfg.train.shard_size)?;
    println!(
        "{} split ({} sequences): {}",
        Split::from(a.split),
        ds.len(),
        describe(&e)
    );
    let mut ok = true;
    if let Some(max) = a.max_nrmse {
        match e.nrmse {
            Some(v) if v <= max => {}
            Some(v) => {
                eprintln!("nrmse {v:.4e} exceeds the required {max:.4e}");
                ok = false;
            }
            None => return Err(Error::Config("--max-nrmse needs a regression task".into())),
        }
    }
    if let Some(min) = a.min_accuracy {
        match e.accuracy {
            Some(v) if v >= min => {}
            Some(v) => {
                eprintln!("accuracy {v:.4} is below the required {min:.4}");
                ok = false;
            }
            None => return Err(Error::Config("--min-accuracy needs a classification task".into())),
        }
    }
    Ok(if ok { Outcome::Success } else { Outcome::CheckFailed })
}

fn cmd_verify(a: &VerifyArgs) -> Result<Outcome> {
    let suite: Suite = a.suite.parse()?;
    let opts = VerifyOptions {
        seed: a.seed,
        fault: a.inject_fault.map(|FaultArg::CorruptBackward| Fault::CorruptBackward),
    };
    let records = run_suite(suite, &opts)?;
    print!("{}", format_table(&records));
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&records)
            .map_err(|e| Error::Config(format!("cannot serialize verification records: {e}")))?;
        write_file(path, &text)?;
    }
    let failed = records.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", records.len());
        Ok(Outcome::Success)
    } else {
        println!("{failed} of {} checks failed", records.len());
        Ok(Outcome::CheckFailed)
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<Outcome> {
    let impls = a.impls.iter().map(|s| s.parse()).collect::<Result<Vec<BenchImpl>>>()?;
    if a.steps.is_empty() {
        return Err(Error::Config("--steps needs at least one length".into()));
    }
    let mut rows = Vec::new();
    for &steps in &a.steps {
        let cfg = BenchConfig {
            steps,
            hidden: a.hidden,
            layers: a.layers,
            batch: a.batch,
            input_dim: a.input_dim,
            repeats: a.repeats,
            warmup: a.warmup,
            seed: a.seed,
            impls: impls.clone(),
            ..Default::default()
        };
        let part = run_bench(&cfg)?;
        for r in &part {
            eprintln!(
                "N={steps} {:<15} mean {:.4e} s  (min {:.4e} s, {} repeats)",
                r.implementation.as_str(),
                r.mean_seconds,
                r.min_seconds,
                r.repeats
            );
        }
        rows.extend(part);
    }
    let text = bench_csv(&rows);
    print!("{text}");
    if let Some(path) = &a.out {
        write_file(path, &text)?;
    }
    std::io::stdout().flush().map_err(|e| Error::io("<stdout>", e))?;
    Ok(Outcome::Success)
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let kind = match a.task {
        GenTask::Lorenz96 => "lorenz96",
        GenTask::NoisePadded => "noise-padded",
    };
    let mut overrides = vec![Override::new("task.kind", kind)];
    if let Some(f) = a.forcing {
        if a.task != GenTask::Lorenz96 {
            return Err(Error::Config("--F applies to lorenz96 only".into()));
        }
        overrides.push(Override::new("task.forcing", f));
    }
    if let Some(s) = a.seed {
        overrides.push(Override::new("task.seed", s as i64));
    }
    for raw in &a.overrides {
        let o: Override = raw.parse()?;
        let mut path = vec!["task".to_string()];
        path.extend(o.path);
        overrides.push(Override { path, value: o.value });
    }
    let cfg = RunConfig::layered(None, None, &overrides)?;
    let ds = match &cfg.task {
        TaskConfig::Csv(_) => unreachable!("gen-data builds synthetic tasks only"),
        task => task.load()?,
    };
    write_csv_sequences(&ds, &a.out)?;
    let [tr, va, te] = ds.split_counts();
    println!(
        "wrote {} sequences ({tr} train, {va} valid, {te} test) to {}",
        ds.len(),
        a.out.display()
    );
    Ok(Outcome::Success)
}
