//! Wall-clock scaling of vanilla against group attention.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{csv_error, Timeseries};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{AttentionMode, Model, ModelConfig};
use crate::tape::GradTape;

/// Timestamps per window in the benchmark model.
pub const BENCH_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Window counts, ascending.
    pub lengths: Vec<usize>,
    pub groups: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub trials: usize,
    pub seed: u64,
    /// Estimated peak bytes above which a mode is skipped and recorded N/A.
    pub memory_limit: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048],
            groups: 32,
            d_model: 16,
            layers: 2,
            heads: 1,
            trials: 5,
            seed: 0,
            memory_limit: 4 << 30,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() {
            return Err(Error::config("lengths", "must list at least one length"));
        }
        if self.lengths.contains(&0) {
            return Err(Error::config("lengths", "must be positive"));
        }
        if self.lengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("lengths", format!("{:?} must be strictly ascending", self.lengths)));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.groups == 0 {
            return Err(Error::config("groups", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    /// Median seconds; `None` when skipped by the memory guard.
    pub t_vanilla: Option<f64>,
    pub t_group: Option<f64>,
}

impl BenchRow {
    pub fn speedup(&self) -> Option<f64> {
        Some(self.t_vanilla? / self.t_group?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of time against length; `None` with fewer than two
    /// measured lengths.
    pub exponent_vanilla: Option<f64>,
    pub exponent_group: Option<f64>,
}

/// Rough peak footprint of one forward and backward pass in bytes. Score
/// matrices dominate: a handful of `n × cols` buffers per head per layer.
pub fn estimated_bytes(cfg: &BenchConfig, length: usize, mode: AttentionMode) -> u64 {
    let rows = length as u64 + 1;
    let cols = match mode {
        AttentionMode::Vanilla => rows,
        AttentionMode::Group => (cfg.groups as u64).min(rows),
    };
    let scores = 8 * rows * cols * 8 * (cfg.layers * cfg.heads) as u64;
    let activations = 8 * rows * cfg.d_model as u64 * 64 * cfg.layers as u64;
    scores + activations
}

fn bench_model(cfg: &BenchConfig, length: usize, mode: AttentionMode) -> Result<Model> {
    let mut model = Model::new(ModelConfig {
        d_model: cfg.d_model,
        layers: cfg.layers,
        heads: cfg.heads,
        window: BENCH_KERNEL,
        stride: BENCH_KERNEL,
        n_max: length,
        mode,
        seed: cfg.seed,
        ..ModelConfig::desk(1)
    })?;
    for s in &mut model.schedulers {
        s.n_current = cfg.groups as f64;
    }
    model.groups_initialized = true;
    Ok(model)
}

/// One forward and backward pass on the reconstruction sum.
fn pass(model: &Model, ts: &Timeseries) -> Result<()> {
    let mut tape = GradTape::new();
    let vars = model.leaves(&mut tape);
    let (out, _) = model.reconstruct(&mut tape, &vars, ts)?;
    let loss = tape.sum_all(out);
    tape.backward(loss)?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn time_mode(cfg: &BenchConfig, length: usize, mode: AttentionMode, ts: &Timeseries) -> Result<Option<f64>> {
    let need = estimated_bytes(cfg, length, mode);
    if need > cfg.memory_limit {
        log::warn!("bench: {mode:?} at length {length} needs ~{need} bytes, recording N/A");
        return Ok(None);
    }
    let model = bench_model(cfg, length, mode)?;
    pass(&model, ts)?;
    let mut times = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let start = Instant::now();
        pass(&model, ts)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(Some(median(times)))
}

/// Least-squares slope of `ln t` against `ln length` over measured rows.
pub fn loglog_exponent(points: &[(usize, Option<f64>)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|&(l, t)| t.filter(|t| *t > 0.0).map(|t| ((l as f64).ln(), t.ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Median forward+backward time per length for both modes.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &length in &cfg.lengths {
        let ts = Timeseries::new(Matrix::random_uniform(length * BENCH_KERNEL, 1, 0.0, 1.0, &mut rng));
        let t_vanilla = time_mode(cfg, length, AttentionMode::Vanilla, &ts)?;
        let t_group = time_mode(cfg, length, AttentionMode::Group, &ts)?;
        log::info!("bench length {length}: vanilla {t_vanilla:?} group {t_group:?}");
        rows.push(BenchRow {
            length,
            t_vanilla,
            t_group,
        });
    }
    let exponent_vanilla = loglog_exponent(&rows.iter().map(|r| (r.length, r.t_vanilla)).collect::<Vec<_>>());
    let exponent_group = loglog_exponent(&rows.iter().map(|r| (r.length, r.t_group)).collect::<Vec<_>>());
    Ok(BenchReport {
        rows,
        exponent_vanilla,
        exponent_group,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "N/A".to_string(), |v| format!("{v:.6e}"))
}

/// CSV with columns `length,t_vanilla,t_group,speedup`.
pub fn write_bench_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let to_err = |e| csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["length", "t_vanilla", "t_group", "speedup"]).map_err(to_err)?;
    for r in &report.rows {
        w.write_record([r.length.to_string(), cell(r.t_vanilla), cell(r.t_group), cell(r.speedup())])
            .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
