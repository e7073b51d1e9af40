//! Command line: `gen`, `partialize`, `train`, `eval` and `sweep`.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad or missing flags), 2 on
//! runtime errors (unreadable input, missing truth, failed training). Every
//! file written starts with a `#cfg ` line (a `cfg` field in JSON outputs)
//! holding the resolved configuration.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{self, PartialDataset, SyntheticSpec};
use crate::eval::{self, ApResult, GroupMap, PhaseDistribution, PhaseRow};
use crate::model::{self, Architecture, OptimizerConfig, OptimizerKind};
use crate::schemes::{Scheme, SchemeConfig};
use crate::trainer::{self, MemorizationTracker, RunReport, TrackerDump, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "wsml",
    version,
    about = "Multi-label learning from partial labels with large-loss modification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a fully observed synthetic dataset with ground truth.
    Gen(GenArgs),
    /// Hide labels of a fully observed dataset.
    Partialize(PartializeArgs),
    /// Train one model and write metrics, report, checkpoint and tracker.
    Train(TrainArgs),
    /// Evaluate a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Train once per value of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub pos_rate: f64,
    #[arg(long)]
    pub seed: u64,
    /// Logit temperature of the hidden labelling model.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Also write a held-out set of this many samples from the same model.
    #[arg(long, requires = "test_out")]
    pub test_n: Option<usize>,
    #[arg(long, requires = "test_n")]
    #[serde(skip)]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartialMode {
    SinglePositive,
    Fraction,
}

#[derive(Debug, Args, Serialize)]
pub struct PartializeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub mode: PartialMode,
    /// Fraction of all labels kept observed (fraction mode).
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Flags shared by `train` and `sweep`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out set scored with the best-validation model.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value = "adam", value_parser = ["sgd", "adam"])]
    pub optimizer: String,
    /// Learning-rate multiplier for the output layer.
    #[arg(long)]
    pub output_lr_mult: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub delta_rel: Option<f64>,
    #[arg(long)]
    pub r0: Option<f64>,
    #[arg(long)]
    pub delta_abs: Option<f64>,
    #[arg(long)]
    pub eps_smooth: Option<f64>,
    #[arg(long, default_value = "mlp1")]
    pub arch: Architecture,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub frozen_epochs: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
    /// Train on a random fraction of the samples.
    #[arg(long)]
    pub subsample: Option<f64>,
    /// Verify per-batch invariants while training.
    #[arg(long)]
    pub debug_checks: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKey {
    /// Observed labels per category.
    Observed,
    /// Ground-truth positives per category.
    Positives,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split categories into this many frequency groups.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, value_enum, default_value = "positives")]
    pub group_key: GroupKey,
    /// Dataset whose labels define the group counts (defaults to `--data`).
    #[arg(long)]
    pub counts_from: Option<PathBuf>,
    /// Print the highest-loss phase table.
    #[arg(long, requires = "tracker")]
    pub phase_table: bool,
    /// Tracker dump written by `train`; `--data` must be the training input.
    #[arg(long)]
    pub tracker: Option<PathBuf>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    DeltaRel,
    Subsample,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Partialize(a) => cmd_partialize(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn cfg_line(cfg: &Value) -> String {
    format!("#cfg {cfg}\n")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_dataset_file(path: &Path, ds: &PartialDataset, cfg: &Value) -> Result<(), CliError> {
    let mut buf = cfg_line(cfg).into_bytes();
    dataset::write_dataset(ds, &mut buf).map_err(runtime)?;
    fs::write(path, buf).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, cfg: &Value, body: &impl Serialize) -> Result<(), CliError> {
    write_text(path, &(to_json_with_cfg(cfg, body)? + "\n"))
}

fn to_json_with_cfg(cfg: &Value, body: &impl Serialize) -> Result<String, CliError> {
    let mut v = serde_json::to_value(body).map_err(runtime)?;
    if let Value::Object(map) = &mut v {
        map.insert("cfg".into(), cfg.clone());
    }
    serde_json::to_string_pretty(&v).map_err(runtime)
}

fn load(path: &Path) -> Result<PartialDataset, CliError> {
    dataset::load_dataset(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let mut spec = SyntheticSpec::new(a.n, a.dim, a.classes, a.pos_rate, a.seed);
    spec.temperature = a.temperature;
    spec.validate().map_err(usage)?;
    let cfg = json!({ "command": "gen", "args": a });
    match (a.test_n, &a.test_out) {
        (Some(m), Some(test_out)) => {
            if m == 0 {
                return Err(usage("--test-n must be >= 1"));
            }
            let (ds, test) = dataset::generate_synthetic_with_holdout(&spec, m).map_err(runtime)?;
            write_dataset_file(&a.out, &ds, &cfg)?;
            write_dataset_file(test_out, &test, &cfg)
        }
        _ => {
            let ds = dataset::generate_synthetic(&spec).map_err(runtime)?;
            write_dataset_file(&a.out, &ds, &cfg)
        }
    }
}

fn cmd_partialize(a: &PartializeArgs) -> Result<(), CliError> {
    let fraction = match (a.mode, a.fraction) {
        (PartialMode::Fraction, None) => return Err(usage("--mode fraction requires --fraction")),
        (PartialMode::Fraction, Some(f)) if !(f > 0.0 && f <= 1.0) => {
            return Err(usage(format!("--fraction {f} must lie in (0, 1]")))
        }
        (PartialMode::SinglePositive, Some(_)) => {
            eprintln!("warning: --fraction is ignored in single-positive mode");
            None
        }
        (_, f) => f,
    };
    let full = load(&a.input)?;
    let partial = match fraction {
        Some(f) => dataset::make_fraction_observed(&full, f, a.seed),
        None => dataset::make_single_positive(&full, a.seed),
    }
    .map_err(|e| runtime(format!("{}: {e}", a.input.display())))?;
    let cfg = json!({ "command": "partialize", "args": a });
    write_dataset_file(&a.out, &partial, &cfg)
}

/// Builds the training configuration, warning about flags the scheme or
/// architecture does not read.
pub fn resolve_train_config(o: &TrainOpts) -> Result<TrainConfig, CliError> {
    let scheme = o.scheme;
    let mlp = o.arch == Architecture::Mlp1;
    let pick = |flag: &str, value: Option<f64>, used: bool, default: f64| match value {
        Some(v) if used => v,
        Some(_) => {
            eprintln!("warning: --{flag} is ignored by scheme {scheme}");
            default
        }
        None => default,
    };
    let d = SchemeConfig::new(scheme);
    let sc = SchemeConfig {
        scheme,
        delta_rel: pick("delta-rel", o.delta_rel, scheme.is_relative(), d.delta_rel),
        r0: pick("r0", o.r0, scheme.is_absolute(), d.r0),
        delta_abs: pick("delta-abs", o.delta_abs, scheme.is_absolute(), d.delta_abs),
        eps_smooth: pick(
            "eps-smooth",
            o.eps_smooth,
            scheme == Scheme::Lsan,
            d.eps_smooth,
        ),
    };
    for (flag, set) in [
        ("hidden", o.hidden.is_some()),
        ("frozen-epochs", o.frozen_epochs.is_some()),
    ] {
        if set && !mlp {
            eprintln!("warning: --{flag} is ignored by arch {}", o.arch.token());
        }
    }
    let kind: OptimizerKind = o.optimizer.parse().map_err(usage)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch,
        seed: o.seed,
        optimizer: OptimizerConfig {
            kind,
            lr: o.lr,
            output_lr_multiplier: o.output_lr_mult.unwrap_or(1.0),
        },
        scheme: sc,
        val_fraction: o.val_frac,
        frozen_epochs: o.frozen_epochs.unwrap_or(0),
        arch: o.arch,
        hidden: o.hidden.unwrap_or(defaults.hidden),
        debug_checks: o.debug_checks,
    };
    cfg.validate().map_err(usage)?;
    if let Some(f) = o.subsample {
        if !(f > 0.0 && f <= 1.0) {
            return Err(usage(format!("--subsample {f} must lie in (0, 1]")));
        }
    }
    Ok(cfg)
}

fn load_inputs(o: &TrainOpts) -> Result<(PartialDataset, Option<PartialDataset>), CliError> {
    let ds = load(&o.data)?;
    let test = o.test.as_deref().map(load).transpose()?;
    if let Some(t) = &test {
        if t.truth().is_none() {
            return Err(runtime(format!(
                "{}: test set has no TRUTH section",
                o.test.as_ref().unwrap().display()
            )));
        }
    }
    Ok((ds, test))
}

fn train_once(
    cfg: &TrainConfig,
    ds: &PartialDataset,
    test: Option<&PartialDataset>,
    subsample: Option<f64>,
) -> Result<(trainer::TrainOutcome, Vec<usize>), CliError> {
    let rows = match subsample {
        Some(f) => dataset::subsample_indices(ds.n_samples(), f, cfg.seed).map_err(runtime)?,
        None => (0..ds.n_samples()).collect(),
    };
    let sub;
    let data = if subsample.is_some() {
        sub = ds.select_rows(&rows);
        &sub
    } else {
        ds
    };
    let outcome = trainer::run(cfg, data, test).map_err(runtime)?;
    Ok((outcome, rows))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&a.opts)?;
    let (ds, test) = load_inputs(&a.opts)?;
    let echo = json!({
        "command": "train",
        "data": a.opts.data,
        "test": a.opts.test,
        "subsample": a.opts.subsample,
        "train": cfg,
    });
    let (outcome, rows) = train_once(&cfg, &ds, test.as_ref(), a.opts.subsample)?;

    let model_path = with_suffix(&a.out_prefix, ".model");
    let mut report = outcome.report;
    report.checkpoint = Some(model_path.display().to_string());

    let mut buf = cfg_line(&echo).into_bytes();
    model::write_model(&outcome.best_model, &mut buf).map_err(runtime)?;
    fs::write(&model_path, buf)
        .map_err(|e| runtime(format!("cannot write {}: {e}", model_path.display())))?;

    let echo_text = echo.to_string();
    write_text(
        &with_suffix(&a.out_prefix, ".metrics.csv"),
        &trainer::metrics_csv(&report, Some(&echo_text)),
    )?;
    write_json(&with_suffix(&a.out_prefix, ".report.json"), &echo, &report)?;
    let tracker_rows: Vec<usize> = outcome.train_rows.iter().map(|&r| rows[r]).collect();
    write_json(
        &with_suffix(&a.out_prefix, ".tracker.json"),
        &echo,
        &outcome.tracker.dump(&tracker_rows),
    )?;
    eprintln!(
        "best epoch {} val mAP {:.2}{}",
        report.best_epoch,
        report.best_val_map,
        report
            .test_map
            .map(|m| format!(" test mAP {m:.2}"))
            .unwrap_or_default()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    n_samples: usize,
    map_percent: f64,
    ap: ApResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<GroupMap>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase: Option<PhaseDistribution>,
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let clf =
        model::load_model(&a.model).map_err(|e| runtime(format!("{}: {e}", a.model.display())))?;
    let ds = load(&a.data)?;
    let truth = ds.truth().ok_or_else(|| {
        runtime(format!(
            "{}: evaluation needs a TRUTH section",
            a.data.display()
        ))
    })?;
    if clf.input_dim() != ds.dim() || clf.n_classes() != ds.n_classes() {
        return Err(runtime(format!(
            "model expects D={} K={}, data has D={} K={}",
            clf.input_dim(),
            clf.n_classes(),
            ds.dim(),
            ds.n_classes()
        )));
    }
    let scores = clf.forward(ds.features()).map_err(runtime)?;
    let ap = eval::mean_average_precision(scores.view(), truth.labels()).map_err(runtime)?;

    let groups = match a.groups {
        None => None,
        Some(g) => {
            if g == 0 || g > ds.n_classes() {
                return Err(usage(format!(
                    "--groups {g} must lie in [1, {}]",
                    ds.n_classes()
                )));
            }
            let source = a.counts_from.as_deref().map(load).transpose()?;
            let src = source.as_ref().unwrap_or(&ds);
            if src.n_classes() != ds.n_classes() {
                return Err(runtime(
                    "--counts-from has a different number of categories",
                ));
            }
            let counts = match a.group_key {
                GroupKey::Observed => src.observed_counts_per_class(),
                GroupKey::Positives => src
                    .truth()
                    .ok_or_else(|| {
                        runtime("--group-key positives needs a TRUTH section in the count source")
                    })?
                    .positive_counts(),
            };
            Some(eval::grouped_map(scores.view(), truth.labels(), &counts, g).map_err(runtime)?)
        }
    };

    let phase = match &a.tracker {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let dump: TrackerDump = serde_json::from_str(&text)
                .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            if dump.k != ds.n_classes()
                || dump.rows.len() != dump.n
                || dump.rows.iter().any(|&r| r >= ds.n_samples())
            {
                return Err(runtime("tracker dump does not match --data"));
            }
            let tracker = MemorizationTracker::from_dump(&dump).map_err(runtime)?;
            let rows = ds.select_rows(&dump.rows);
            let truth = rows.truth().expect("truth checked above");
            Some(eval::phase_distribution(&tracker, truth, rows.states()).map_err(runtime)?)
        }
    };
    if a.phase_table {
        if let Some(p) = &phase {
            eprint!("{}", phase_table(p));
        }
    }

    let cfg = json!({ "command": "eval", "args": a });
    let out = EvalOutput {
        n_samples: ds.n_samples(),
        map_percent: ap.map_percent(),
        ap,
        groups,
        phase,
    };
    match &a.out {
        Some(path) => write_json(path, &cfg, &out),
        None => {
            println!("{}", to_json_with_cfg(&cfg, &out)?);
            Ok(())
        }
    }
}

/// Text rendering of the highest-loss phase distribution.
pub fn phase_table(p: &PhaseDistribution) -> String {
    let mut s = format!(
        "{:<6}{:>10}{:>12}{:>12}\n",
        "label", "count", "warmup %", "regular %"
    );
    let rows: [(&str, Option<PhaseRow>); 3] = [("TP", p.tp), ("TN", p.tn), ("FN", p.fn_)];
    for (name, row) in rows {
        match row {
            Some(r) => {
                s += &format!(
                    "{name:<6}{:>10}{:>12.1}{:>12.1}\n",
                    r.count, r.warmup_pct, r.regular_pct
                )
            }
            None => s += &format!("{name:<6}{:>10}{:>12}{:>12}\n", 0, "-", "-"),
        }
    }
    s
}

/// Parses a comma-separated list, rejecting empty lists and duplicates.
pub fn parse_values(text: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = text
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    if parts.is_empty() {
        return Err(usage("--values must list at least one value"));
    }
    let values: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| usage(format!("invalid value '{p}' in --values")))
        })
        .collect::<Result<_, _>>()?;
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for (p, v) in parts.iter().zip(&values) {
        if !seen.insert(v.to_bits()) && !dups.contains(p) {
            dups.push(*p);
        }
    }
    if !dups.is_empty() {
        return Err(usage(format!(
            "duplicate values in --values: {}",
            dups.join(", ")
        )));
    }
    Ok(values)
}

/// Worker threads for sweeps: `WSML_THREADS` if set to a positive integer,
/// otherwise the number of logical processors.
fn sweep_threads() -> Result<usize, CliError> {
    match std::env::var("WSML_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!(
                "WSML_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone)]
struct SweepRow {
    value: f64,
    report: RunReport,
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut values = parse_values(&a.values)?;
    values.sort_by(f64::total_cmp);
    let base = resolve_train_config(&a.opts)?;
    match a.param {
        SweepParam::DeltaRel => {
            if let Some(v) = values.iter().find(|v| **v < 0.0) {
                return Err(usage(format!("delta-rel value {v} must be >= 0")));
            }
            if !base.scheme.scheme.is_relative() {
                eprintln!(
                    "warning: scheme {} does not read delta-rel",
                    base.scheme.scheme
                );
            }
            if a.opts.delta_rel.is_some() {
                eprintln!("warning: --delta-rel is overridden by the sweep values");
            }
        }
        SweepParam::Subsample => {
            if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                return Err(usage(format!("subsample value {v} must lie in (0, 1]")));
            }
            if a.opts.subsample.is_some() {
                eprintln!("warning: --subsample is overridden by the sweep values");
            }
        }
    }
    let threads = sweep_threads()?;
    let (ds, test) = load_inputs(&a.opts)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(runtime)?;
    let rows: Vec<SweepRow> = pool.install(|| {
        values
            .par_iter()
            .enumerate()
            .map(|(i, &value)| {
                let mut cfg = base.clone();
                cfg.seed = base.seed.wrapping_add(i as u64);
                let subsample = match a.param {
                    SweepParam::DeltaRel => {
                        cfg.scheme.delta_rel = value;
                        a.opts.subsample
                    }
                    SweepParam::Subsample => Some(value),
                };
                let (outcome, _) = train_once(&cfg, &ds, test.as_ref(), subsample)?;
                Ok(SweepRow {
                    value,
                    report: outcome.report,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let echo = json!({
        "command": "sweep",
        "param": a.param,
        "values": values,
        "data": a.opts.data,
        "test": a.opts.test,
        "subsample": a.opts.subsample,
        "train": base,
    });
    let mut csv = cfg_line(&echo);
    csv.push_str("value,best_val_map,best_epoch,test_map,n_effective\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.17e},{},{},{}\n",
            r.value,
            r.report.best_val_map,
            r.report.best_epoch,
            r.report
                .test_map
                .map(|m| format!("{m:.17e}"))
                .unwrap_or_default(),
            r.report.n_samples
        ));
    }
    write_text(&a.out, &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_reject_empty_and_duplicates() {
        assert!(matches!(parse_values(""), Err(CliError::Usage(_))));
        assert!(matches!(parse_values(" , "), Err(CliError::Usage(_))));
        match parse_values("0.1,0.2,0.1,0.3,0.2") {
            Err(CliError::Usage(m)) => assert!(m.contains("0.1, 0.2"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_values("0.3, 0.1").unwrap(), vec![0.3, 0.1]);
        assert!(parse_values("0.1,abc").is_err());
    }

    #[test]
    fn irrelevant_flags_are_accepted() {
        let cli = Cli::try_parse_from([
            "wsml",
            "train",
            "--data",
            "d",
            "--scheme",
            "ll-r",
            "--seed",
            "1",
            "--r0",
            "2.0",
            "--out-prefix",
            "p",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!()
        };
        let cfg = resolve_train_config(&a.opts).unwrap();
        assert_eq!(cfg.scheme.r0, 1.5);
        assert_eq!(cfg.scheme.scheme, Scheme::LlR);
    }

    #[test]
    fn bad_scheme_token_is_a_usage_error() {
        let code = main_with_args([
            "wsml",
            "train",
            "--data",
            "d",
            "--scheme",
            "ll-x",
            "--seed",
            "1",
            "--out-prefix",
            "p",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn phase_table_renders_missing_rows() {
        let p = PhaseDistribution {
            tp: Some(PhaseRow {
                count: 4,
                warmup_pct: 75.0,
                regular_pct: 25.0,
            }),
            tn: None,
            fn_: None,
        };
        let t = phase_table(&p);
        assert!(t.contains("75.0"));
        assert_eq!(t.lines().count(), 4);
    }
}
