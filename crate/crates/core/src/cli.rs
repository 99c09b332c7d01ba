//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 training aborted on divergence,
//! 4 input/output failure (unreadable or malformed files included).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::agent::{predict, RouteAgent};
use crate::domain::{RoutePermutation, Sample, N_MAX};
use crate::metrics::{evaluate_dataset, Bucket, MetricReport};
use crate::synthgen::{
    baseline_distance_greedy, baseline_time_greedy, generate_dataset, read_dataset, write_dataset, GenConfig,
};
use crate::trainer::{load_model, pretrain, save_model, train, Method, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "routerl", version, about = "Route prediction with policy-gradient training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate couriers and write a dataset.
    Generate(GenerateArgs),
    /// Cross-entropy pretraining; same as `train --method ce`.
    Pretrain(TrainArgs),
    /// Train a model and write a checkpoint and a per-epoch log.
    Train(TrainArgs),
    /// Score a model or a baseline on a dataset.
    Evaluate(EvaluateArgs),
    /// Write greedy route predictions.
    Predict(PredictArgs),
    /// Merge training logs into one long-format reward table.
    RewardCurve(RewardCurveArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings as key=value lines; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub samples_per_worker: Option<usize>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// mixed, distance or time.
    #[arg(long)]
    pub profile: Option<String>,
    /// Choice noise of a fixed profile; 0 makes workers deterministic.
    #[arg(long)]
    pub noise_temp: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ce,
    Reinforce,
    Ac,
    Gae,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ce => Method::Ce,
            MethodArg::Reinforce => Method::Reinforce,
            MethodArg::Ac => Method::Ac,
            MethodArg::Gae => Method::Gae,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set for the per-epoch metrics.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Training settings as key=value lines; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Starting checkpoint; required for the policy-gradient methods.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    TimeGreedy,
    DistanceGreedy,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// 11 or 25; both buckets when omitted.
    #[arg(long)]
    pub bucket: Option<usize>,
    /// Any other upper bound on the task count.
    #[arg(long, conflicts_with = "bucket")]
    pub bucket_max: Option<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RewardCurveArgs {
    /// A training log, optionally labelled as `method=path`; the label
    /// defaults to the file stem.
    #[arg(long = "log")]
    pub logs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Aborted(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Aborted(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_data(path: &Path) -> Result<Vec<Sample>, CliError> {
    read_dataset(path).map_err(|e| io_err(path, e))
}

fn load_agent(path: &Path) -> Result<RouteAgent, CliError> {
    load_model(path).map_err(|e| io_err(path, e))
}

/// Parses `args` (program name first) and runs the command, writing the
/// summary line to `out`. Returns the process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
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
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Pretrain(mut a) => {
            if a.method.is_some_and(|m| m != MethodArg::Ce) {
                return Err(CliError::Usage("pretrain only runs --method ce".into()));
            }
            a.method = Some(MethodArg::Ce);
            cmd_train(a, out)
        }
        Command::Train(a) => cmd_train(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::RewardCurve(a) => cmd_reward_curve(a, out),
    }
}

fn say(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Io(e.to_string()))
}

pub fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = GenConfig::default();
    let usage = |e: crate::synthgen::SynthError| CliError::Usage(e.to_string());
    if let Some(path) = &a.config {
        cfg.apply_text(&read_text(path)?).map_err(usage)?;
    }
    let flags: [(&str, Option<String>); 8] = [
        ("workers", a.workers.map(|v| v.to_string())),
        ("samples_per_worker", a.samples_per_worker.map(|v| v.to_string())),
        ("n_min", a.n_min.map(|v| v.to_string())),
        ("n_max", a.n_max.map(|v| v.to_string())),
        ("rho", a.rho.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("profile", a.profile.clone()),
        ("noise_temp", a.noise_temp.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(usage)?;
        }
    }
    cfg.validate().map_err(usage)?;
    let data = generate_dataset(&cfg).map_err(usage)?;
    write_dataset(&data, &a.out).map_err(|e| io_err(&a.out, e))?;
    let mean_n = if data.is_empty() {
        0.0
    } else {
        data.iter().map(Sample::n).sum::<usize>() as f64 / data.len() as f64
    };
    say(out, &format!("samples={} mean_n={mean_n:.3}", data.len()))
}

pub fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_text(&read_text(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(m) = a.method {
        cfg.method = m.into();
    }
    if let Some(e) = a.epochs {
        cfg.pretrain_epochs = e;
        cfg.train_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.method != Method::Ce && a.init_model.is_none() {
        return Err(CliError::Usage(format!(
            "--method {} needs --init-model with a pretrained checkpoint",
            cfg.method.name()
        )));
    }
    let data = load_data(&a.data)?;
    let val = match &a.val {
        Some(p) => load_data(p)?,
        None => Vec::new(),
    };
    let agent = match &a.init_model {
        Some(p) => load_agent(p)?,
        None => RouteAgent::new(cfg.agent_config()).map_err(|e| CliError::Usage(e.to_string()))?,
    };
    let result = if cfg.method == Method::Ce {
        pretrain(&data, &val, &cfg, agent)
    } else {
        train(&data, &val, &cfg, agent)
    };
    let finish = |agent: &RouteAgent, log: &TrainLog| -> Result<(), CliError> {
        save_model(agent, &a.out_model).map_err(|e| io_err(&a.out_model, e))?;
        if let Some(p) = &a.log {
            write_text(p, &log.to_csv())?;
        }
        Ok(())
    };
    match result {
        Ok((agent, log)) => {
            finish(&agent, &log)?;
            let last = log.rows.last();
            say(
                out,
                &format!(
                    "method={} epochs={} mean_reward={} val_lsd={}",
                    cfg.method.name(),
                    log.rows.len(),
                    last.map_or(f64::NAN, |r| r.mean_reward),
                    last.map_or(f64::NAN, |r| r.val_lsd)
                ),
            )
        }
        Err(TrainError::Diverged {
            epoch,
            batch,
            what,
            last_good,
        }) => {
            let (agent, log) = *last_good;
            finish(&agent, &log)?;
            Err(CliError::Aborted(format!(
                "training diverged at epoch {epoch}, batch {batch} ({what} not finite); last good parameters saved to {}",
                a.out_model.display()
            )))
        }
        Err(TrainError::EmptyDataset) => Err(io_err(&a.data, "training set is empty")),
        Err(e @ TrainError::Config(_)) => Err(CliError::Usage(e.to_string())),
        Err(e) => Err(CliError::Io(e.to_string())),
    }
}

fn predictions(data: &[Sample], agent: Option<&RouteAgent>, baseline: Option<BaselineArg>) -> Result<Vec<RoutePermutation>, CliError> {
    data.iter()
        .enumerate()
        .map(|(i, s)| match (agent, baseline) {
            (Some(a), _) => predict(s, a).map_err(|e| CliError::Io(format!("sample {i}: {e}"))),
            (None, Some(BaselineArg::TimeGreedy)) => Ok(baseline_time_greedy(s)),
            (None, Some(BaselineArg::DistanceGreedy)) => Ok(baseline_distance_greedy(s)),
            (None, None) => unreachable!("checked by the caller"),
        })
        .collect()
}

pub fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.model.is_some() == a.baseline.is_some() {
        return Err(CliError::Usage("give exactly one of --model and --baseline".into()));
    }
    let buckets = match (a.bucket, a.bucket_max) {
        (Some(11), None) => vec![Bucket::UP_TO_11],
        (Some(25), None) => vec![Bucket::UP_TO_25],
        (Some(b), None) => return Err(CliError::Usage(format!("--bucket must be 11 or 25, got {b}"))),
        (None, Some(max)) if (1..=N_MAX).contains(&max) => vec![Bucket { max }],
        (None, Some(max)) => return Err(CliError::Usage(format!("--bucket-max must lie in 1..={N_MAX}, got {max}"))),
        _ => vec![Bucket::UP_TO_11, Bucket::UP_TO_25],
    };
    let data = load_data(&a.data)?;
    let agent = a.model.as_deref().map(load_agent).transpose()?;
    let preds = predictions(&data, agent.as_ref(), a.baseline)?;
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for b in buckets {
        let report = evaluate_dataset(&data, &preds, b).map_err(|e| CliError::Io(e.to_string()))?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => out.write_all(csv.as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}

pub fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(&a.data)?;
    let agent = load_agent(&a.model)?;
    let preds = predictions(&data, Some(&agent), None)?;
    let mut text = String::new();
    for (i, (p, s)) in preds.iter().zip(&data).enumerate() {
        // Re-validate before anything reaches the file.
        let checked = RoutePermutation::new(p.as_slice().to_vec()).map_err(|e| CliError::Io(format!("sample {i}: {e}")))?;
        if checked.len() != s.n() {
            return Err(CliError::Io(format!("sample {i}: route covers {} of {} tasks", checked.len(), s.n())));
        }
        let _ = writeln!(text, "{i} {checked}");
    }
    write_text(&a.out, &text)?;
    say(out, &format!("predicted={}", preds.len()))
}

/// Reads the `(epoch, mean_reward)` columns of a training log.
pub fn parse_log(path: &Path, text: &str) -> Result<Vec<(usize, f64)>, CliError> {
    let bad = |line: usize, msg: &str| CliError::Io(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TrainLog::CSV_HEADER => {}
        _ => return Err(bad(1, "missing training log header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(bad(i + 1, "expected 8 columns"));
        }
        let epoch = cols[0].trim().parse().map_err(|_| bad(i + 1, "bad epoch"))?;
        let reward = cols[1].trim().parse().map_err(|_| bad(i + 1, "bad mean_reward"))?;
        rows.push((epoch, reward));
    }
    Ok(rows)
}

pub fn cmd_reward_curve(a: RewardCurveArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.logs.is_empty() {
        return Err(CliError::Usage("give at least one --log".into()));
    }
    let mut csv = String::from("method,epoch,mean_reward\n");
    for spec in &a.logs {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, p)
            }
        };
        for (epoch, reward) in parse_log(&path, &read_text(&path)?)? {
            let _ = writeln!(csv, "{label},{epoch},{reward}");
        }
    }
    write_text(&a.out, &csv)?;
    say(out, &format!("logs={}", a.logs.len()))
}
