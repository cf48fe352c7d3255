//! Command-line front end: `train`, `eval`, `sweep` and `synthetic`.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional
//! `key=value` file and command-line flags (in that order of precedence),
//! validates it completely and only then touches data.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::metrics::{rmse, MetricsReport};
use crate::model::{self, Model, ModelConfig, ModelKind};
use crate::preprocess::NormalizationParams;
use crate::sparse_tensor::{self, load_wsdream, DataSplit, SplitRatios, TensorShape};
use crate::synthetic::{self, parse_ranks, GeneratorSpec};
use crate::training::{self, TrainConfig, TrainTrace};

pub const REPORT_FILE: &str = "report.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const TRACE_FILE: &str = "trace.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SYNTHETIC_FILE: &str = "synthetic.txt";

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub shape: Option<TensorShape>,
    pub index_base: usize,
    pub split: SplitRatios,
    pub seed: u64,
    pub model: ModelKind,
    pub model_config: ModelConfig,
    pub train: TrainConfig,
    /// Apply `ln(1 + v)` before min-max scaling.
    pub log_transform: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            shape: None,
            index_base: 0,
            split: SplitRatios::new(0.05, 0.15, 0.80).expect("valid ratios"),
            seed: 0,
            model: ModelKind::Msntucf,
            model_config: ModelConfig::default(),
            train: TrainConfig::default(),
            log_transform: true,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Checks every invariant; data-independent, so it runs before any I/O.
    pub fn validate(&self) -> Result<()> {
        if self.index_base > 1 {
            return Err(Error::Config(format!("index base must be 0 or 1, got {}", self.index_base)));
        }
        self.model_config.validate()?;
        self.train.validate()?;
        if self.split.train <= 0.0 || self.split.test <= 0.0 {
            return Err(Error::Config(format!(
                "train and test fractions must be positive, got {}",
                self.split
            )));
        }
        Ok(())
    }

    fn require_data(&self) -> Result<(&Path, TensorShape)> {
        let data = self.data.as_deref().ok_or_else(|| Error::Config("--data is required".into()))?;
        let shape = self.shape.ok_or_else(|| Error::Config("--shape is required".into()))?;
        Ok((data, shape))
    }

    /// Seeds of the model initializer and the trainer follow the run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.model_config.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn to_kv(&self, doc: &mut KvDoc) {
        if let Some(d) = &self.data {
            doc.set("data", d.display());
        }
        if let Some(s) = self.shape {
            doc.set("shape", s);
        }
        doc.set("index_base", self.index_base);
        doc.set("split", self.split);
        doc.set("seed", self.seed);
        doc.set("model", self.model);
        self.model_config.to_kv(doc);
        self.train.to_kv(doc);
        doc.set("log_transform", self.log_transform);
        doc.set("out", self.out.display());
    }

    pub fn update_from_kv(&mut self, doc: &KvDoc) -> Result<()> {
        if let Some(v) = doc.get("data") {
            self.data = Some(PathBuf::from(v));
        }
        if let Some(v) = doc.parsed("shape")? {
            self.shape = Some(v);
        }
        if let Some(v) = doc.parsed("index_base")? {
            self.index_base = v;
        }
        if let Some(v) = doc.get("split") {
            self.split = v.parse()?;
        }
        if let Some(v) = doc.parsed("seed")? {
            *self = self.with_seed(v);
        }
        if let Some(v) = doc.get("model") {
            self.model = v.parse()?;
        }
        self.model_config.update_from_kv(doc)?;
        self.train.update_from_kv(doc)?;
        if let Some(v) = doc.parsed("log_transform")? {
            self.log_transform = v;
        }
        if let Some(v) = doc.get("out") {
            self.out = PathBuf::from(v);
        }
        Ok(())
    }
}

/// Summary of one completed training run, written as `report.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: RunConfig,
    pub norm: NormalizationParams,
    pub trace_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: MetricsReport,
    pub wall_seconds: f64,
    pub repetition: usize,
}

impl RunReport {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        self.config.to_kv(&mut doc);
        doc.set("norm.log_applied", self.norm.log_applied);
        doc.set("norm.z_min", self.norm.z_min);
        doc.set("norm.z_max", self.norm.z_max);
        doc.set("trace", self.trace_path.display());
        doc.set("checkpoint", self.checkpoint_path.display());
        doc.set("best_epoch", self.best_epoch);
        doc.set("epochs_run", self.epochs_run);
        self.test.to_kv("test", &mut doc);
        doc.set("wall_seconds", format!("{:.3}", self.wall_seconds));
        doc.set("repetition", self.repetition);
        doc
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Loads and splits the data set of a run.
pub fn load_split(config: &RunConfig) -> Result<DataSplit> {
    let (data, shape) = config.require_data()?;
    let tensor = load_wsdream(data, shape, config.index_base).map_err(|e| e.within("sparse_tensor"))?;
    let split = sparse_tensor::split(&tensor, config.split, config.seed);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Validation(format!(
            "{} observed entries leave an empty train or test part under split {}",
            tensor.len(),
            config.split
        ))
        .within("sparse_tensor"));
    }
    Ok(split)
}

/// A trained model together with its trace and held-out metrics.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub model: Model,
    pub trace: TrainTrace,
    pub test: MetricsReport,
}

/// Fits normalization and a model on an existing split.
pub fn train_on_split(
    split: &DataSplit,
    kind: ModelKind,
    model_config: &ModelConfig,
    train: &TrainConfig,
    log_transform: bool,
) -> Result<(Outcome, NormalizationParams)> {
    let norm = NormalizationParams::fit(split, log_transform).map_err(|e| e.within("preprocess"))?;
    let (model, trace) =
        training::fit(kind, split, &norm, model_config.clone(), train).map_err(|e| e.within("training"))?;
    let test = training::evaluate(&model, &split.test, &norm).map_err(|e| e.within("metrics"))?;
    Ok((Outcome { model, trace, test }, norm))
}

/// Loads, splits, normalizes, trains, evaluates and writes the report,
/// checkpoint, trace and timing files into `config.out`.
pub fn cmd_train(config: &RunConfig) -> Result<RunReport> {
    run_train(config, 0)
}

fn run_train(config: &RunConfig, repetition: usize) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let split = load_split(config)?;
    let (outcome, norm) =
        train_on_split(&split, config.model, &config.model_config, &config.train, config.log_transform)?;

    create_dir(&config.out)?;
    let trace_path = config.out.join(TRACE_FILE);
    let checkpoint_path = config.out.join(CHECKPOINT_FILE);
    write_file(&trace_path, &outcome.trace.to_csv())?;
    write_file(&config.out.join(TIMING_FILE), &outcome.trace.timing_csv())?;
    model::save_checkpoint(&checkpoint_path, &outcome.model, &norm)?;
    let report = RunReport {
        config: config.clone(),
        norm,
        trace_path,
        checkpoint_path,
        best_epoch: outcome.trace.best_epoch,
        epochs_run: outcome.trace.records.len(),
        test: outcome.test,
        wall_seconds: started.elapsed().as_secs_f64(),
        repetition,
    };
    write_file(&config.out.join(REPORT_FILE), &report.to_kv().render())?;
    Ok(report)
}

/// Evaluates a saved checkpoint on the test part of `config`'s split.
///
/// The shape defaults to the checkpoint's; an explicit, different shape is
/// a validation error. Evaluation never applies dropout.
pub fn cmd_eval(checkpoint: &Path, config: &RunConfig, force_dropout: bool) -> Result<MetricsReport> {
    if force_dropout {
        return Err(Error::Usage("evaluation is always dropout-free; --force-dropout is rejected".into()));
    }
    if config.index_base > 1 {
        return Err(Error::Config(format!("index base must be 0 or 1, got {}", config.index_base)));
    }
    let (model, norm) = model::load_checkpoint(checkpoint).map_err(|e| e.within("model"))?;
    if let Some(shape) = config.shape {
        if shape != model.shape {
            return Err(Error::Validation(format!(
                "data shape {shape} does not match checkpoint shape {}",
                model.shape
            )));
        }
    }
    let mut config = config.clone();
    config.shape = Some(model.shape);
    let split = load_split(&config)?;
    training::evaluate(&model, &split.test, &norm).map_err(|e| e.within("metrics"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Heads,
    Loops,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Heads => "heads",
            SweepAxis::Loops => "loops",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(Self::Heads),
            "loops" => Ok(Self::Loops),
            _ => Err(Error::Config(format!("sweep axis must be heads or loops, got '{s}'"))),
        }
    }
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub runs: Vec<RunReport>,
    pub mae: Spread,
    pub mre: Spread,
    pub rmse: Spread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("axis,value,reps,mae_mean,mae_std,mre_mean,mre_std,rmse_mean,rmse_std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.axis,
                r.value,
                r.runs.len(),
                r.mae.mean,
                r.mae.std,
                r.mre.mean,
                r.mre.std,
                r.rmse.mean,
                r.rmse.std
            ));
        }
        out
    }
}

/// Trains `reps` runs per axis value with seeds `seed + rep` and writes
/// per-run outputs under `out/<axis>-<value>/rep-<rep>` plus `sweep.csv`.
pub fn cmd_sweep(base: &RunConfig, axis: SweepAxis, values: &[usize], reps: usize) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if reps == 0 {
        return Err(Error::Config("sweep needs at least one repetition".into()));
    }
    let mut jobs = Vec::new();
    for &value in values {
        for rep in 0..reps {
            let mut cfg = base.with_seed(base.seed + rep as u64);
            match axis {
                SweepAxis::Heads => cfg.model_config.heads = value,
                SweepAxis::Loops => cfg.model_config.loops = value,
            }
            cfg.out = base.out.join(format!("{axis}-{value}")).join(format!("rep-{rep}"));
            cfg.validate()?;
            jobs.push((value, rep, cfg));
        }
    }
    let reports: Vec<RunReport> = jobs
        .par_iter()
        .map(|(_, rep, cfg)| run_train(cfg, *rep))
        .collect::<Result<_>>()?;

    let rows = values
        .iter()
        .enumerate()
        .map(|(v, &value)| {
            let runs = reports[v * reps..(v + 1) * reps].to_vec();
            let pick = |f: fn(&MetricsReport) -> f64| Spread::of(&runs.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
            SweepRow {
                value,
                mae: pick(|m| m.mae),
                mre: pick(|m| m.mre),
                rmse: pick(|m| m.rmse),
                runs,
            }
        })
        .collect();
    let report = SweepReport { axis, rows };
    create_dir(&base.out)?;
    write_file(&base.out.join(SWEEP_FILE), &report.to_csv())?;
    Ok(report)
}

/// One model to train in a synthetic comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRun {
    pub kind: ModelKind,
    pub model_config: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct SyntheticResult {
    pub run: SyntheticRun,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct SyntheticReport {
    pub generator: GeneratorSpec,
    pub split: DataSplit,
    /// Test RMSE of predicting the mean training value everywhere.
    pub baseline_rmse: f64,
    pub results: Vec<SyntheticResult>,
}

impl SyntheticReport {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        self.generator.to_kv(&mut doc);
        doc.set("split", self.split.ratios);
        doc.set("split_seed", self.split.seed);
        doc.set("n_train", self.split.train.len());
        doc.set("n_valid", self.split.valid.len());
        doc.set("n_test", self.split.test.len());
        doc.set("baseline.rmse", self.baseline_rmse);
        for r in &self.results {
            let name = r.run.kind.to_string();
            doc.set(&format!("{name}.best_epoch"), r.outcome.trace.best_epoch);
            doc.set(&format!("{name}.epochs_run"), r.outcome.trace.records.len());
            r.outcome.test.to_kv(&name, &mut doc);
        }
        doc
    }
}

/// Generates a low-rank tensor, splits it once and trains every requested
/// model on that split. With `out` set, writes the observations, the
/// comparison report and one trace per model.
pub fn cmd_synthetic(
    generator: &GeneratorSpec,
    ratios: SplitRatios,
    split_seed: u64,
    runs: &[SyntheticRun],
    out: Option<&Path>,
) -> Result<SyntheticReport> {
    generator.validate()?;
    for r in runs {
        r.model_config.validate()?;
        r.train.validate()?;
    }
    synthetic::check_split_sizes(generator, ratios)?;
    let tensor = synthetic::generate(generator).map_err(|e| e.within("synthetic"))?;
    let split = sparse_tensor::split(&tensor.observed, ratios, split_seed);
    let mean = split.train.values().sum::<f64>() / split.train.len() as f64;
    let baseline: Vec<(f64, f64)> = split.test.values().map(|v| (v, mean)).collect();
    let baseline_rmse = rmse(&baseline)?;

    let mut results = Vec::new();
    for run in runs {
        let (outcome, _) = train_on_split(&split, run.kind, &run.model_config, &run.train, true)?;
        results.push(SyntheticResult {
            run: run.clone(),
            outcome,
        });
    }
    let report = SyntheticReport {
        generator: generator.clone(),
        split,
        baseline_rmse,
        results,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        sparse_tensor::write_wsdream(dir.join("observed.txt"), &tensor.observed)?;
        write_file(&dir.join(SYNTHETIC_FILE), &report.to_kv().render())?;
        for r in &report.results {
            write_file(&dir.join(format!("trace-{}.csv", r.run.kind)), &r.outcome.trace.to_csv())?;
        }
    }
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "msntucf", version, about = "Sparse QoS tensor completion with neural Tucker models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and evaluate it on the test split.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the test split.
    Eval(EvalArgs),
    /// Train over a range of head or loop counts.
    Sweep(SweepArgs),
    /// Compare models on a generated low-rank tensor.
    Synthetic(SyntheticArgs),
}

/// Flags shared by every command. Unset flags fall back to `--config`,
/// then to built-in defaults.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// key=value file with run settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Observation file: `user service time value` per line
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Tensor shape I,J,K
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub index_base: Option<usize>,
    /// Train/validation/test ratios, e.g. 0.05,0.15,0.8 or 5:15:80
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// msntucf or neutucf
    #[arg(long)]
    pub model: Option<String>,
    /// Embedding ranks P,Q,R
    #[arg(long)]
    pub rank: Option<String>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub loops: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// Layers defaults, the config file and flags into a validated config.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config.update_from_kv(&KvDoc::parse(&text).map_err(|e| e.within("config"))?)?;
        }
        config.update_from_kv(&self.as_kv())?;
        config.validate()?;
        Ok(config)
    }

    fn as_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                doc.set(k, v);
            }
        };
        put("data", self.data.as_ref().map(|p| p.display().to_string()));
        put("shape", self.shape.clone());
        put("index_base", self.index_base.map(|v| v.to_string()));
        put("split", self.split.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("model", self.model.clone());
        put("rank", self.rank.clone());
        put("heads", self.heads.map(|v| v.to_string()));
        put("loops", self.loops.map(|v| v.to_string()));
        put("dropout", self.dropout.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        doc
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Always rejected: evaluation runs without dropout
    #[arg(long)]
    pub force_dropout: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// heads or loops
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values
    #[arg(long)]
    pub values: String,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Generator Tucker ranks P,Q,R
    #[arg(long, default_value = "3,3,3")]
    pub gen_ranks: String,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub density: f64,
    /// Models to compare, comma-separated
    #[arg(long, default_value = "neutucf,msntucf")]
    pub models: String,
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label}: MAE={:.6} MRE={:.6} RMSE={:.6} (n={}, MRE excluded {})",
        m.mae, m.mre, m.rmse, m.n_entries, m.n_mre_excluded
    );
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let report = cmd_train(&args.resolve()?)?;
            print_metrics("test", &report.test);
            println!("report written to {}", report.config.out.join(REPORT_FILE).display());
        }
        Command::Eval(args) => {
            let mut config = RunConfig::default();
            if let Some(path) = &args.run.config {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                config.update_from_kv(&KvDoc::parse(&text)?)?;
            }
            config.update_from_kv(&args.run.as_kv())?;
            let metrics = cmd_eval(&args.checkpoint, &config, args.force_dropout)?;
            print_metrics("test", &metrics);
        }
        Command::Sweep(args) => {
            let base = args.run.resolve()?;
            let axis: SweepAxis = args.axis.parse()?;
            let values = sparse_tensor::parse_usize_list(&args.values)?;
            let report = cmd_sweep(&base, axis, &values, args.reps)?;
            print!("{}", report.to_csv());
        }
        Command::Synthetic(args) => {
            let mut base = args.run.resolve()?;
            if args.run.split.is_none() && args.run.config.is_none() {
                base.split = SplitRatios::new(0.7, 0.1, 0.2)?;
            }
            let generator = GeneratorSpec {
                shape: base.shape.unwrap_or(GeneratorSpec::default().shape),
                ranks: parse_ranks(&args.gen_ranks)?,
                noise: args.noise,
                density: args.density,
                seed: base.seed,
            };
            let runs = args
                .models
                .split(',')
                .map(|m| {
                    Ok(SyntheticRun {
                        kind: m.trim().parse()?,
                        model_config: base.model_config.clone(),
                        train: base.train.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = cmd_synthetic(&generator, base.split, base.seed, &runs, Some(&base.out))?;
            println!("baseline (train mean): RMSE={:.6}", report.baseline_rmse);
            for r in &report.results {
                print_metrics(&r.run.kind.to_string(), &r.outcome.test);
            }
        }
    }
    Ok(())
}
