//! Optimizer, losses and the task loops: mask-and-predict pretraining,
//! classification finetuning, imputation and forecasting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{mask_tail, mask_timestamps, Timeseries};
use crate::error::{Error, Result};
use crate::matrix::{softmax_in_place, Matrix};
use crate::model::{AttentionMode, ClassifierHead, Model, ModelVars};
use crate::planner::{plan_batches, predict_batch, MemoryModel, DEFAULT_MAX_BATCH, DEFAULT_MIN_POINTS};
use crate::scheduler::TraceRow;
use crate::tape::{GradTape, Var};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *x -= self.lr * (update + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

/// How many series share one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchPolicy {
    Fixed(usize),
    /// Batch chosen by the planner against an abstract memory budget.
    Planned { budget: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub batch: BatchPolicy,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Run the group scheduler after every epoch (group mode only).
    pub schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            weight_decay: 1e-4,
            mask_rate: 0.2,
            batch: BatchPolicy::Fixed(8),
            seed: 0,
            freeze_encoder: false,
            schedule: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::config("mask_rate", format!("{} outside [0, 1)", self.mask_rate)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", format!("{} must be nonnegative", self.weight_decay)));
        }
        match self.batch {
            BatchPolicy::Fixed(0) => Err(Error::config("batch", "must be at least 1")),
            BatchPolicy::Planned { budget } if !(budget > 0.0) => {
                Err(Error::config("budget", format!("{budget} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// Mean squared error over the flagged cells; `None` when no cell is flagged.
pub fn masked_mse(pred: &Matrix, truth: &Matrix, scored: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), &s) in pred.data().iter().zip(truth.data()).zip(scored) {
        if s {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// `softmax(z·W + b)`.
pub fn classify_head(z: &[f64], head: &ClassifierHead) -> Result<Vec<f64>> {
    let logits = Matrix::row_vector(z).matmul(&head.weight)?.add(&head.bias)?;
    let mut p = logits.into_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

/// `(1/C)·Σ −ŷ log y` with one-hot `ŷ`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].ln() / probs.len() as f64
}

fn tape_masked_mse(tape: &mut GradTape, pred: Var, truth: &Matrix, scored: &[bool], count: usize) -> Result<Var> {
    let weights = Matrix::from_vec(
        truth.rows(),
        truth.cols(),
        scored.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
    )?;
    let t = tape.leaf(truth.clone());
    let w = tape.leaf(weights);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, w)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, 1.0 / count as f64))
}

fn tape_cross_entropy(tape: &mut GradTape, hidden: Var, head: (Var, Var), label: usize, classes: usize) -> Result<Var> {
    let z = tape.slice_rows(hidden, 0, 1)?;
    let logits = tape.matmul(z, head.0)?;
    let logits = tape.add(logits, head.1)?;
    let probs = tape.softmax_rows(logits);
    let logp = tape.ln(probs);
    let mut onehot = Matrix::zeros(1, classes);
    onehot.set(0, label, 1.0);
    let y = tape.leaf(onehot);
    let picked = tape.mul(logp, y)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / classes as f64))
}

fn shapes(model: &mut Model, count: usize, skip: usize) -> Vec<(usize, usize)> {
    model.params_mut().iter().skip(skip).take(count).map(|p| p.shape()).collect()
}

/// Accumulates per-sample gradients and applies optimizer steps.
struct Stepper {
    opt: AdamW,
    skip: usize,
    count: usize,
    acc: Vec<Matrix>,
    pending: usize,
}

impl Stepper {
    fn new(model: &mut Model, cfg: &TrainConfig, skip: usize, count: usize) -> Self {
        let sh = shapes(model, count, skip);
        Self {
            opt: AdamW::new(cfg.lr, cfg.weight_decay, &sh),
            skip,
            count,
            acc: sh.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            pending: 0,
        }
    }

    fn accumulate(&mut self, tape: &GradTape, loss: Var, vars: &[Var]) -> Result<()> {
        let grads = tape.backward(loss)?;
        for (a, &v) in self.acc.iter_mut().zip(&vars[self.skip..self.skip + self.count]) {
            if let Some(g) = grads.get(v) {
                a.add_assign(g)?;
            }
        }
        self.pending += 1;
        Ok(())
    }

    fn apply(&mut self, model: &mut Model) -> Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        let inv = 1.0 / self.pending as f64;
        let grads: Vec<Matrix> = self.acc.iter().map(|a| a.scale(inv)).collect();
        let mut params: Vec<&mut Matrix> = model.params_mut().into_iter().skip(self.skip).take(self.count).collect();
        self.opt.step(&mut params, &grads)?;
        for a in &mut self.acc {
            a.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.pending = 0;
        Ok(())
    }
}

fn batch_size(model: &Model, cfg: &TrainConfig, rows: usize, available: usize) -> Result<usize> {
    let b = match cfg.batch {
        BatchPolicy::Fixed(b) => b,
        BatchPolicy::Planned { budget } => {
            let mm = MemoryModel::for_encoder(budget, model.config.d_model, model.config.layers);
            let plan = plan_batches(&mm, rows.max(1), DEFAULT_MIN_POINTS, DEFAULT_MAX_BATCH)?;
            let n = match model.config.mode {
                AttentionMode::Vanilla => rows,
                AttentionMode::Group => model.group_counts(rows).into_iter().max().unwrap_or(rows),
            };
            predict_batch(&plan, rows, n.clamp(1, rows))? as usize
        }
    };
    Ok(b.clamp(1, available.max(1)))
}

/// Runs one scheduler step per layer on the keys `probe` produces.
fn schedule_epoch(model: &mut Model, probe: &Timeseries, epoch: usize, trace: &mut Vec<TraceRow>) -> Result<()> {
    if model.config.mode != AttentionMode::Group {
        return Ok(());
    }
    let mut tape = GradTape::new();
    let vars = model.leaves(&mut tape);
    let fwd = model.forward(&mut tape, &vars, probe)?;
    for (layer, (groups, keys)) in fwd.groupings.iter().zip(&fwd.keys).enumerate() {
        let heads: Vec<_> = groups.iter().zip(keys).collect();
        let report = model.schedulers[layer].step(&heads)?;
        trace.push(TraceRow {
            epoch,
            layer,
            n_before: report.n_before,
            n_after: report.n_after,
            d_threshold: report.d_threshold,
            merged: report.merged,
        });
    }
    Ok(())
}

fn check_series(model: &Model, data: &[Timeseries]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    for ts in data {
        if ts.len() != first.len() || ts.channels() != model.config.channels {
            return Err(Error::Shape {
                op: "dataset",
                left: (ts.len(), ts.channels()),
                right: (first.len(), model.config.channels),
            });
        }
    }
    Ok(model.embedder.n_windows(first.len())? + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean masked MSE per epoch; `None` when every sample was skipped.
    pub loss_curve: Vec<Option<f64>>,
    pub trace: Vec<TraceRow>,
    pub skipped: usize,
}

fn sample_seed(seed: u64, epoch: usize, idx: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(((epoch as u64) << 32) ^ idx as u64)
}

/// Mask-and-predict training on scaled, nonnegative series. Samples whose
/// mask hides nothing observed are skipped with a warning.
pub fn pretrain(model: &mut Model, data: &[Timeseries], cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let rows = check_series(model, data)?;
    model.ensure_groups(data[0].len())?;
    let n_encoder = {
        let mut tape = GradTape::new();
        model.leaves(&mut tape).encoder().len()
    };
    let mut stepper = Stepper::new(model, cfg, 0, n_encoder);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = PretrainReport {
        loss_curve: Vec::with_capacity(cfg.epochs),
        trace: Vec::new(),
        skipped: 0,
    };
    for epoch in 0..cfg.epochs {
        let batch = batch_size(model, cfg, rows, data.len())?;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        let mut scored_samples = 0usize;
        for chunk in order.chunks(batch) {
            for &idx in chunk {
                let ts = &data[idx];
                let masked = mask_timestamps(ts, cfg.mask_rate, sample_seed(cfg.seed, epoch, idx))?;
                let scored: Vec<bool> = masked.mask().iter().zip(ts.mask()).map(|(&m, &orig)| m && !orig).collect();
                let count = scored.iter().filter(|&&s| s).count();
                if count == 0 {
                    log::warn!("epoch {epoch}: sample {idx} has no masked observations, skipping");
                    report.skipped += 1;
                    continue;
                }
                let mut tape = GradTape::new();
                let vars = model.leaves(&mut tape);
                let (pred, _) = model.reconstruct(&mut tape, &vars, &masked)?;
                let loss = tape_masked_mse(&mut tape, pred, ts.values(), &scored, count)?;
                total += tape.value(loss).get(0, 0);
                scored_samples += 1;
                stepper.accumulate(&tape, loss, &vars.all())?;
            }
            stepper.apply(model)?;
        }
        let loss = (scored_samples > 0).then(|| total / scored_samples as f64);
        log::info!("pretrain epoch {epoch}: loss {loss:?}");
        report.loss_curve.push(loss);
        if cfg.schedule {
            schedule_epoch(model, &data[0], epoch, &mut report.trace)?;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub accuracy: f64,
    pub trace: Vec<TraceRow>,
}

/// Trains the classification head on CLS outputs (and the encoder unless
/// frozen), then reports held-out accuracy.
pub fn finetune(
    model: &mut Model,
    train: &[(Timeseries, usize)],
    test: &[(Timeseries, usize)],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if let Some((_, l)) = train.iter().chain(test).find(|(_, l)| *l >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} outside [0, {classes})")));
    }
    for c in 0..classes {
        if !train.iter().any(|(_, l)| *l == c) {
            log::warn!("class {c} has no training samples");
        }
    }
    let series: Vec<Timeseries> = train.iter().map(|(t, _)| t.clone()).collect();
    let rows = check_series(model, &series)?;
    model.ensure_groups(series[0].len())?;
    if model.head.as_ref().map(|h| h.classes()) != Some(classes) {
        model.head = Some(ClassifierHead::zeros(model.config.d_model, classes));
    }
    let n_all = model.params_mut().len();
    let (skip, count) = if cfg.freeze_encoder { (n_all - 2, 2) } else { (0, n_all) };
    let mut stepper = Stepper::new(model, cfg, skip, count);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = FinetuneReport {
        loss_curve: Vec::with_capacity(cfg.epochs),
        train_accuracy: 0.0,
        accuracy: 0.0,
        trace: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let batch = batch_size(model, cfg, rows, train.len())?;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            for &idx in chunk {
                let (ts, label) = &train[idx];
                let mut tape = GradTape::new();
                let vars = model.leaves(&mut tape);
                let fwd = model.forward(&mut tape, &vars, ts)?;
                let head = vars.head.expect("head installed above");
                let loss = tape_cross_entropy(&mut tape, fwd.hidden, head, *label, classes)?;
                total += tape.value(loss).get(0, 0);
                stepper.accumulate(&tape, loss, &vars.all())?;
            }
            stepper.apply(model)?;
        }
        report.loss_curve.push(total / train.len() as f64);
        if cfg.schedule && !cfg.freeze_encoder {
            schedule_epoch(model, &series[0], epoch, &mut report.trace)?;
        }
    }
    report.train_accuracy = accuracy(model, train)?;
    report.accuracy = if test.is_empty() { report.train_accuracy } else { accuracy(model, test)? };
    Ok(report)
}

/// Most probable class.
pub fn predict_class(model: &Model, ts: &Timeseries) -> Result<usize> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no classification head".into()))?;
    let probs = classify_head(&model.cls_embedding(ts)?, head)?;
    Ok(probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

pub fn accuracy(model: &Model, set: &[(Timeseries, usize)]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (ts, label) in set {
        if predict_class(model, ts)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Output of [`impute`].
#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    /// Input with masked cells replaced by the model's reconstruction.
    pub completed: Matrix,
    /// Masked MSE against the ground truth, when one was given.
    pub mse: Option<f64>,
    pub masked: usize,
}

/// Fills masked cells from the decoder; observed cells pass through.
pub fn impute(model: &Model, ts: &Timeseries, truth: Option<&Matrix>) -> Result<Imputation> {
    if let Some(t) = truth {
        if t.shape() != ts.values().shape() {
            return Err(Error::Shape {
                op: "impute",
                left: ts.values().shape(),
                right: t.shape(),
            });
        }
    }
    let masked = ts.masked_count();
    if masked == 0 {
        return Ok(Imputation {
            completed: ts.values().clone(),
            mse: truth.map(|_| 0.0),
            masked,
        });
    }
    let mut tape = GradTape::new();
    let vars = model.leaves(&mut tape);
    let (pred, _) = model.reconstruct(&mut tape, &vars, ts)?;
    let pred = tape.value(pred);
    let mut completed = ts.values().clone();
    for (i, (&m, &p)) in ts.mask().iter().zip(pred.data()).enumerate() {
        if m {
            completed.data_mut()[i] = p;
        }
    }
    let mse = truth.and_then(|t| masked_mse(&completed, t, ts.mask()));
    Ok(Imputation { completed, mse, masked })
}

/// Predicts the final `h` timestamps by masking them and imputing.
pub fn forecast(model: &Model, ts: &Timeseries, h: usize) -> Result<Matrix> {
    let masked = mask_tail(ts, h)?;
    let out = impute(model, &masked, None)?;
    out.completed.slice_rows(ts.len() - h, ts.len())
}

/// Per-channel mean of the observed cells written into masked cells.
pub fn mean_imputation(ts: &Timeseries) -> Matrix {
    let (t, m) = (ts.len(), ts.channels());
    let mut out = ts.values().clone();
    for c in 0..m {
        let observed: Vec<f64> = (0..t).filter(|&i| !ts.is_masked(i, c)).map(|i| ts.values().get(i, c)).collect();
        let mean = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for i in 0..t {
            if ts.is_masked(i, c) {
                out.set(i, c, mean);
            }
        }
    }
    out
}

/// Handles collected for a caller driving its own loop.
pub fn trainable_vars(vars: &ModelVars, freeze_encoder: bool) -> Vec<Var> {
    let all = vars.all();
    if freeze_encoder && vars.head.is_some() {
        all[all.len() - 2..].to_vec()
    } else {
        all
    }
}
