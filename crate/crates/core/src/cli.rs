//! Command driver: configuration merging, dispatch and artifact writing.
//!
//! Settings come from a flat `key = value` file, then `GA_SEED`, then
//! command-line flags, later sources winning. Every run writes
//! `manifest.json` with the resolved settings, `metrics.csv` and
//! `summary.json` under the output directory.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::bench::{bench_scaling, write_bench_csv, BenchConfig};
use crate::embedder::{mask_tail, mask_timestamps, write_csv, Scaler, Timeseries};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Checkpoint, Model, ModelConfig, CHECKPOINT_VERSION};
use crate::planner::{plan_batches, MemoryModel};
use crate::scheduler::write_trace;
use crate::synth::{generate, load_dataset, write_dataset, DatasetKind, SynthConfig};
use crate::train::{finetune, impute, masked_mse, mean_imputation, pretrain, BatchPolicy, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenSynthetic,
    Pretrain,
    Finetune,
    Impute,
    Forecast,
    Bench,
    PlanBatch,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenSynthetic,
        Command::Pretrain,
        Command::Finetune,
        Command::Impute,
        Command::Forecast,
        Command::Bench,
        Command::PlanBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenSynthetic => "gen-synthetic",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Impute => "impute",
            Command::Forecast => "forecast",
            Command::Bench => "bench",
            Command::PlanBatch => "plan-batch",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::GenSynthetic => "Write a synthetic sinusoid dataset",
            Command::Pretrain => "Mask-and-predict pretraining",
            Command::Finetune => "Train a classifier, optionally from a pretrained checkpoint",
            Command::Impute => "Fill randomly masked timestamps from a checkpoint",
            Command::Forecast => "Predict the final timestamps of each series from a checkpoint",
            Command::Bench => "Time vanilla against group attention over sequence lengths",
            Command::PlanBatch => "Fit a batch size plan against a memory model",
        }
    }

    /// Setting keys the command reads.
    pub fn keys(self) -> &'static [&'static str] {
        const MODEL: &[&str] = &[
            "seed", "data", "mode", "d_model", "layers", "heads", "window", "stride", "n_max", "epsilon",
            "alpha", "kmeans_iters", "epochs", "lr", "weight_decay", "mask_rate", "batch", "budget", "schedule",
        ];
        match self {
            Command::GenSynthetic => &["seed", "kind", "t", "m", "classes", "samples", "noise", "kernel"],
            Command::Pretrain => MODEL,
            Command::Finetune => &[
                "seed", "data", "mode", "d_model", "layers", "heads", "window", "stride", "n_max", "epsilon",
                "alpha", "kmeans_iters", "epochs", "lr", "weight_decay", "batch", "budget", "schedule", "checkpoint",
                "freeze", "train_fraction",
            ],
            Command::Impute => &["seed", "data", "checkpoint", "mask_rate"],
            Command::Forecast => &["seed", "data", "checkpoint", "horizon"],
            Command::Bench => &["seed", "lengths", "groups", "d_model", "layers", "heads", "trials", "memory_limit"],
            Command::PlanBatch => &["lmax", "budget", "d_model", "layers", "min_points", "max_batch"],
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown command {s:?}")))
    }
}

/// Every key any command accepts, with its flag help.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "Random seed; GA_SEED overrides the config file, this flag overrides both"),
    ("data", "Dataset directory with index.csv"),
    ("checkpoint", "Checkpoint JSON to start from or evaluate"),
    ("kind", "classification or imputation"),
    ("t", "Timestamps per series"),
    ("m", "Channels per series"),
    ("classes", "Number of classes"),
    ("samples", "Series per class (classification) or in total (imputation)"),
    ("noise", "Gaussian noise standard deviation"),
    ("kernel", "Window size the data is meant for"),
    ("mode", "Attention mode: group or vanilla"),
    ("d_model", "Embedding dimension"),
    ("layers", "Encoder layers"),
    ("heads", "Attention heads"),
    ("window", "Convolution window"),
    ("stride", "Convolution stride (defaults to the window)"),
    ("n_max", "Maximum number of windows"),
    ("epsilon", "Attention error bound, above 1"),
    ("alpha", "Scheduler momentum in (0, 1]"),
    ("kmeans_iters", "K-means iterations per grouping"),
    ("epochs", "Training epochs"),
    ("lr", "Learning rate"),
    ("weight_decay", "AdamW weight decay"),
    ("mask_rate", "Fraction of timestamps hidden"),
    ("batch", "Series per optimizer step"),
    ("budget", "Memory budget; with training commands, plans the batch size"),
    ("schedule", "Run the group scheduler each epoch (true or false)"),
    ("freeze", "Train only the classification head (true or false)"),
    ("train_fraction", "Fraction of labelled series used for training"),
    ("horizon", "Timestamps to forecast"),
    ("lengths", "Comma separated window counts, ascending"),
    ("groups", "Fixed group count"),
    ("trials", "Timed trials per length"),
    ("memory_limit", "Estimated bytes above which a timing is recorded N/A"),
    ("lmax", "Largest sequence length to plan for"),
    ("min_points", "Samples required per fitted sub-plane"),
    ("max_batch", "Largest batch the search considers"),
];

/// Parses flat `key = value` text. `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config("config", format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if !KEYS.iter().any(|(key, _)| *key == k) {
            return Err(Error::config(k, format!("line {}: unknown key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Resolved settings for one command.
#[derive(Debug)]
pub struct RunConfig {
    pub command: Command,
    pub out: PathBuf,
    raw: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl RunConfig {
    /// Merges `file < GA_SEED < flags`. Keys the command does not read are
    /// rejected when given as flags and ignored when they come from a file.
    pub fn resolve(
        command: Command,
        out: PathBuf,
        file: Option<&Path>,
        env_seed: Option<String>,
        flags: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut raw = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config_text(&text)?
            }
            None => BTreeMap::new(),
        };
        raw.retain(|k, _| command.keys().contains(&k.as_str()));
        if let Some(s) = env_seed {
            raw.insert("seed".into(), s);
        }
        for (k, v) in flags {
            if !command.keys().contains(&k.as_str()) {
                return Err(Error::config(k, format!("not used by {}", command.name())));
            }
            raw.insert(k, v);
        }
        Ok(Self {
            command,
            out,
            raw,
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    fn parse<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let Some(s) = self.raw.get(key) else {
            return Ok(None);
        };
        let value = s
            .parse::<T>()
            .map_err(|e| Error::config(key, format!("cannot parse {s:?}: {e}")))?;
        self.record(key, value.to_string());
        Ok(Some(value))
    }

    /// Value of `key` or `default`; the resolved value enters the manifest.
    pub fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.parse(key)? {
            Some(v) => Ok(v),
            None => {
                self.record(key, default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.parse(key)
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.raw.get(key).map(|s| {
            self.record(key, s.clone());
            PathBuf::from(s)
        }))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?
            .ok_or_else(|| Error::config(key, format!("required by {}", self.command.name())))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed", 0u64)
    }

    /// Resolved settings so far, in key order.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt_cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn load_data(rc: &RunConfig) -> Result<(Vec<Timeseries>, Option<Vec<usize>>)> {
    let dir = rc.required_path("data")?;
    if !dir.join("index.csv").is_file() {
        return Err(Error::config(
            "data",
            format!("{} is not a dataset directory (no index.csv)", dir.display()),
        ));
    }
    load_dataset(&dir)
}

fn load_checkpoint(rc: &RunConfig, required: bool) -> Result<Option<Checkpoint>> {
    let path = if required {
        Some(rc.required_path("checkpoint")?)
    } else {
        rc.path("checkpoint")?
    };
    match path {
        Some(p) if !p.is_file() => Err(Error::config("checkpoint", format!("{} does not exist", p.display()))),
        Some(p) => Checkpoint::load(&p).map(Some),
        None => Ok(None),
    }
}

fn model_config(rc: &RunConfig, channels: usize, seed: u64) -> Result<ModelConfig> {
    let base = ModelConfig::desk(channels);
    let window = rc.get("window", base.window)?;
    let cfg = ModelConfig {
        mode: rc.get("mode", AttentionModeArg(base.mode))?.0,
        d_model: rc.get("d_model", base.d_model)?,
        layers: rc.get("layers", base.layers)?,
        heads: rc.get("heads", base.heads)?,
        window,
        stride: rc.get("stride", window)?,
        n_max: rc.get("n_max", base.n_max)?,
        epsilon: rc.get("epsilon", base.epsilon)?,
        alpha: rc.get("alpha", base.alpha)?,
        kmeans_iters: rc.get("kmeans_iters", base.kmeans_iters)?,
        seed,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(rc: &RunConfig, seed: u64, masked: bool) -> Result<TrainConfig> {
    let base = TrainConfig::default();
    let batch = match rc.get_opt::<f64>("budget")? {
        Some(budget) => BatchPolicy::Planned { budget },
        None => BatchPolicy::Fixed(rc.get("batch", 8usize)?),
    };
    let cfg = TrainConfig {
        epochs: rc.get("epochs", base.epochs)?,
        lr: rc.get("lr", 3e-3)?,
        weight_decay: rc.get("weight_decay", base.weight_decay)?,
        mask_rate: if masked { rc.get("mask_rate", base.mask_rate)? } else { base.mask_rate },
        batch,
        seed,
        freeze_encoder: if masked { false } else { rc.get("freeze", false)? },
        schedule: rc.get("schedule", base.schedule)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `Display` for [`AttentionMode`] so it can be recorded like other settings.
struct AttentionModeArg(AttentionMode);

impl FromStr for AttentionModeArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(AttentionModeArg)
    }
}

impl Display for AttentionModeArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            AttentionMode::Vanilla => "vanilla",
            AttentionMode::Group => "group",
        })
    }
}

struct KindArg(DatasetKind);

impl FromStr for KindArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(KindArg)
    }
}

impl Display for KindArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            DatasetKind::Classification => "classification",
            DatasetKind::Imputation => "imputation",
        })
    }
}

/// Comma separated list of window counts.
struct Lengths(Vec<usize>);

impl FromStr for Lengths {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.split(',').map(|x| x.trim().parse()).collect::<std::result::Result<_, _>>().map(Lengths)
    }
}

impl Display for Lengths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

fn manifest(rc: &RunConfig) -> serde_json::Value {
    json!({
        "command": rc.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": rc.resolved(),
    })
}

/// Runs one command, writing artifacts under `rc.out`.
pub fn run(rc: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&rc.out).map_err(|e| Error::io(&rc.out, e))?;
    let summary = match rc.command {
        Command::GenSynthetic => gen_synthetic(rc)?,
        Command::Pretrain => run_pretrain(rc)?,
        Command::Finetune => run_finetune(rc)?,
        Command::Impute => run_impute(rc)?,
        Command::Forecast => run_forecast(rc)?,
        Command::Bench => run_bench(rc)?,
        Command::PlanBatch => run_plan(rc)?,
    };
    write_json(&rc.out.join("summary.json"), &summary)?;
    write_json(&rc.out.join("manifest.json"), &manifest(rc))
}

fn gen_synthetic(rc: &RunConfig) -> Result<serde_json::Value> {
    let base = SynthConfig::default();
    let cfg = SynthConfig {
        kind: rc.get("kind", KindArg(base.kind))?.0,
        t: rc.get("t", base.t)?,
        m: rc.get("m", base.m)?,
        classes: rc.get("classes", base.classes)?,
        samples: rc.get("samples", base.samples)?,
        noise: rc.get("noise", base.noise)?,
        seed: rc.seed()?,
        kernel: rc.get("kernel", base.kernel)?,
    };
    let ds = generate(&cfg)?;
    write_dataset(&ds, &rc.out)?;
    let mut metrics = String::from("class,series\n");
    if ds.labels.is_empty() {
        metrics.push_str(&format!(",{}\n", ds.series.len()));
    } else {
        for c in 0..cfg.classes {
            metrics.push_str(&format!("{c},{}\n", ds.labels.iter().filter(|&&l| l == c).count()));
        }
    }
    write_text(&rc.out.join("metrics.csv"), &metrics)?;
    Ok(json!({ "series": ds.series.len(), "dataset": cfg }))
}

fn loss_csv<I: IntoIterator<Item = Option<f64>>>(losses: I) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in losses.into_iter().enumerate() {
        out.push_str(&format!("{e},{}\n", opt_cell(l)));
    }
    out
}

fn run_pretrain(rc: &RunConfig) -> Result<serde_json::Value> {
    let seed = rc.seed()?;
    let (raw, _) = load_data(rc)?;
    let mcfg = model_config(rc, raw[0].channels(), seed)?;
    let tcfg = train_config(rc, seed, true)?;
    let scaler = Scaler::fit(&raw)?;
    let data = raw.iter().map(|t| scaler.transform(t)).collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(mcfg)?;
    let report = pretrain(&mut model, &data, &tcfg)?;
    write_text(&rc.out.join("metrics.csv"), &loss_csv(report.loss_curve.iter().copied()))?;
    write_trace(&rc.out.join("trace.csv"), &report.trace)?;
    let groups: Vec<f64> = model.schedulers.iter().map(|s| s.n_current).collect();
    Checkpoint::new(model, scaler).save(&rc.out.join("checkpoint.json"))?;
    Ok(json!({
        "initial_loss": report.loss_curve.iter().flatten().next(),
        "final_loss": report.loss_curve.iter().rev().flatten().next(),
        "skipped": report.skipped,
        "group_counts": groups,
    }))
}

fn run_finetune(rc: &RunConfig) -> Result<serde_json::Value> {
    let seed = rc.seed()?;
    let (raw, labels) = load_data(rc)?;
    let labels = labels.ok_or_else(|| Error::config("data", "finetune needs a labelled dataset"))?;
    let (mut model, scaler) = match load_checkpoint(rc, false)? {
        Some(ck) => (ck.model, ck.scaler),
        None => (Model::new(model_config(rc, raw[0].channels(), seed)?)?, Scaler::fit(&raw)?),
    };
    let tcfg = train_config(rc, seed, false)?;
    let fraction: f64 = rc.get("train_fraction", 0.75)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("train_fraction", format!("{fraction} must lie in (0, 1)")));
    }
    let mut set = raw
        .iter()
        .map(|t| scaler.transform(t))
        .zip(labels.iter().copied())
        .map(|(t, l)| t.map(|t| (t, l)))
        .collect::<Result<Vec<_>>>()?;
    set.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((set.len() as f64 * fraction).round() as usize).clamp(1, set.len().saturating_sub(1).max(1));
    let (train, test) = set.split_at(cut);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let report = finetune(&mut model, train, test, classes, &tcfg)?;
    write_text(&rc.out.join("metrics.csv"), &loss_csv(report.loss_curve.iter().map(|&l| Some(l))))?;
    write_trace(&rc.out.join("trace.csv"), &report.trace)?;
    Checkpoint::new(model, scaler).save(&rc.out.join("checkpoint.json"))?;
    Ok(json!({
        "accuracy": report.accuracy,
        "train_accuracy": report.train_accuracy,
        "classes": classes,
        "train": train.len(),
        "test": test.len(),
    }))
}

fn sample_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:05}.csv"))
}

fn run_impute(rc: &RunConfig) -> Result<serde_json::Value> {
    let seed = rc.seed()?;
    let ck = load_checkpoint(rc, true)?.expect("required checkpoint");
    let rate: f64 = rc.get("mask_rate", 0.2)?;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("mask_rate", format!("{rate} outside [0, 1)")));
    }
    let (raw, _) = load_data(rc)?;
    let dir = rc.out.join("imputed");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut metrics = String::from("sample,masked,mse,baseline_mse\n");
    let mut rows = Vec::with_capacity(raw.len());
    for (i, series) in raw.iter().enumerate() {
        let ts = ck.scaler.transform(series)?;
        let masked = mask_timestamps(&ts, rate, seed.wrapping_add(i as u64))?;
        let scored: Vec<bool> = masked.mask().iter().zip(ts.mask()).map(|(&m, &o)| m && !o).collect();
        let out = impute(&ck.model, &masked, None)?;
        let mse = masked_mse(&out.completed, ts.values(), &scored);
        let baseline = masked_mse(&mean_imputation(&masked), ts.values(), &scored);
        metrics.push_str(&format!("{i},{},{},{}\n", out.masked, opt_cell(mse), opt_cell(baseline)));
        write_csv(&sample_file(&dir, i), &ck.scaler.inverse(&out.completed)?, None)?;
        rows.push((mse, baseline));
    }
    write_text(&rc.out.join("metrics.csv"), &metrics)?;
    Ok(json!({
        "samples": raw.len(),
        "mean_mse": mean_of(rows.iter().filter_map(|r| r.0)),
        "mean_baseline_mse": mean_of(rows.iter().filter_map(|r| r.1)),
    }))
}

fn run_forecast(rc: &RunConfig) -> Result<serde_json::Value> {
    rc.seed()?;
    let ck = load_checkpoint(rc, true)?.expect("required checkpoint");
    let horizon: usize = rc.get("horizon", ck.model.config.window)?;
    let (raw, _) = load_data(rc)?;
    let dir = rc.out.join("forecasts");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut metrics = String::from("sample,mse,baseline_mse\n");
    let mut rows = Vec::with_capacity(raw.len());
    for (i, series) in raw.iter().enumerate() {
        if horizon == 0 || horizon >= series.len() {
            return Err(Error::config(
                "horizon",
                format!("{horizon} must lie in [1, {}) for sample {i}", series.len()),
            ));
        }
        let ts = ck.scaler.transform(series)?;
        let masked = mask_tail(&ts, horizon)?;
        let scored: Vec<bool> = masked.mask().iter().zip(ts.mask()).map(|(&m, &o)| m && !o).collect();
        let out = impute(&ck.model, &masked, None)?;
        let mse = masked_mse(&out.completed, ts.values(), &scored);
        let baseline = masked_mse(&mean_imputation(&masked), ts.values(), &scored);
        metrics.push_str(&format!("{i},{},{}\n", opt_cell(mse), opt_cell(baseline)));
        let tail = out.completed.slice_rows(ts.len() - horizon, ts.len())?;
        write_csv(&sample_file(&dir, i), &ck.scaler.inverse(&tail)?, None)?;
        rows.push((mse, baseline));
    }
    write_text(&rc.out.join("metrics.csv"), &metrics)?;
    Ok(json!({
        "samples": raw.len(),
        "horizon": horizon,
        "mean_mse": mean_of(rows.iter().filter_map(|r| r.0)),
        "mean_baseline_mse": mean_of(rows.iter().filter_map(|r| r.1)),
    }))
}

fn run_bench(rc: &RunConfig) -> Result<serde_json::Value> {
    let base = BenchConfig::default();
    let cfg = BenchConfig {
        lengths: rc.get("lengths", Lengths(base.lengths))?.0,
        groups: rc.get("groups", base.groups)?,
        d_model: rc.get("d_model", base.d_model)?,
        layers: rc.get("layers", base.layers)?,
        heads: rc.get("heads", base.heads)?,
        trials: rc.get("trials", base.trials)?,
        seed: rc.seed()?,
        memory_limit: rc.get("memory_limit", base.memory_limit)?,
    };
    let report = bench_scaling(&cfg)?;
    write_bench_csv(&rc.out.join("metrics.csv"), &report)?;
    Ok(json!({
        "exponent_vanilla": report.exponent_vanilla,
        "exponent_group": report.exponent_group,
        "speedup_at_max": report.rows.last().and_then(|r| r.speedup()),
    }))
}

fn run_plan(rc: &RunConfig) -> Result<serde_json::Value> {
    let l_max: usize = rc.get("lmax", 64)?;
    if l_max == 0 {
        return Err(Error::config("lmax", "must be at least 1"));
    }
    let budget: f64 = rc.get("budget", 1e7)?;
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::config("budget", format!("{budget} must be positive")));
    }
    let memory = MemoryModel::for_encoder(budget, rc.get("d_model", 16usize)?, rc.get("layers", 2usize)?);
    let plan = plan_batches(
        &memory,
        l_max,
        rc.get("min_points", crate::planner::DEFAULT_MIN_POINTS)?,
        rc.get("max_batch", crate::planner::DEFAULT_MAX_BATCH)?,
    )?;
    write_json(&rc.out.join("plan.json"), &plan)?;
    let mut metrics = String::from("l_lo,l_hi,n_lo,n_hi,coef_ln,coef_l,coef_c,error\n");
    for p in &plan.partition {
        let [a, b, c] = p.fit.coef;
        metrics.push_str(&format!(
            "{},{},{},{},{a},{b},{c},{}\n",
            p.l_lo, p.l_hi, p.n_lo, p.n_hi, p.fit.error
        ));
    }
    write_text(&rc.out.join("metrics.csv"), &metrics)?;
    Ok(json!({
        "l_max": l_max,
        "pieces": plan.partition.len(),
        "total_error": plan.total_error,
        "samples": plan.samples.len(),
    }))
}
