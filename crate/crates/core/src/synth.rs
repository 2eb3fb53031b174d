//! Synthetic sinusoid datasets.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedder::{read_csv, write_csv, Timeseries};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Classification,
    Imputation,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Self::Classification),
            "imputation" => Ok(Self::Imputation),
            other => Err(Error::config(
                "kind",
                format!("expected classification or imputation, got {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: DatasetKind,
    /// Timestamps per series.
    pub t: usize,
    /// Channels per series.
    pub m: usize,
    pub classes: usize,
    /// Series per class (classification) or in total (imputation).
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
    /// Kernel size the data is meant for; `t` must be at least twice this.
    pub kernel: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Classification,
            t: 64,
            m: 1,
            classes: 3,
            samples: 20,
            noise: 0.1,
            seed: 0,
            kernel: 4,
        }
    }
}

/// Generated series with labels (empty for imputation data).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub series: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn timeseries(&self) -> Vec<Timeseries> {
        self.series.iter().cloned().map(Timeseries::new).collect()
    }
}

/// Sinusoid mixture: `(cycles per series, phase, amplitude)` per component.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub components: Vec<(f64, f64, f64)>,
}

impl Mixture {
    fn random(rng: &mut ChaCha8Rng, t: usize) -> Self {
        let count = rng.random_range(2..=3);
        let max_cycles = (t as f64 / 8.0).max(1.0);
        let components = (0..count)
            .map(|_| {
                (
                    rng.random_range(1.0..=max_cycles),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        Self { components }
    }

    /// Class `c` of `classes`: frequencies on a class-specific lattice so
    /// no two classes share a component.
    fn for_class(rng: &mut ChaCha8Rng, c: usize, classes: usize, t: usize) -> Self {
        let count = rng.random_range(2..=3);
        let max_cycles = (t as f64 / 6.0).max(1.0);
        let raw: Vec<f64> = (0..count).map(|k| 1.0 + c as f64 + (k * (classes + 1)) as f64).collect();
        let top = raw.iter().cloned().fold(1.0, f64::max);
        let unit = (max_cycles / top).min(1.0);
        let components = raw
            .into_iter()
            .map(|f| (f * unit, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0)))
            .collect();
        Self { components }
    }

    /// `t × m` samples; channel `ch` is phase shifted by `ch·π/3`.
    pub fn render(&self, t: usize, m: usize) -> Matrix {
        let mut out = Matrix::zeros(t, m);
        for tau in 0..t {
            for ch in 0..m {
                let x: f64 = self
                    .components
                    .iter()
                    .map(|&(f, phase, amp)| amp * (2.0 * PI * f * tau as f64 / t as f64 + phase + ch as f64 * PI / 3.0).sin())
                    .sum();
                out.set(tau, ch, x);
            }
        }
        out
    }
}

fn check(cfg: &SynthConfig) -> Result<()> {
    if cfg.kernel == 0 || cfg.t < 2 * cfg.kernel {
        return Err(Error::config("t", format!("{} must be at least twice the kernel size {}", cfg.t, cfg.kernel)));
    }
    if cfg.m == 0 {
        return Err(Error::config("m", "must be at least 1"));
    }
    if cfg.samples == 0 {
        return Err(Error::config("samples", "must be at least 1"));
    }
    if cfg.kind == DatasetKind::Classification && cfg.classes == 0 {
        return Err(Error::config("classes", "must be at least 1"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::config("noise", format!("{} must be finite and nonnegative", cfg.noise)));
    }
    Ok(())
}

fn add_noise(x: &mut Matrix, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        x.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(())
}

/// Per-class mixtures used by [`generate`] for classification data.
pub fn class_mixtures(cfg: &SynthConfig) -> Vec<Mixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.classes)
        .map(|c| Mixture::for_class(&mut rng, c, cfg.classes, cfg.t))
        .collect()
}

/// Classification: class-specific mixtures plus Gaussian noise, samples
/// interleaved by class. Imputation: one random mixture per series.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    check(cfg)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E_ED0F_DA7A);
    match cfg.kind {
        DatasetKind::Classification => {
            let clean: Vec<Matrix> = class_mixtures(cfg).iter().map(|mx| mx.render(cfg.t, cfg.m)).collect();
            let mut series = Vec::with_capacity(cfg.samples * cfg.classes);
            let mut labels = Vec::with_capacity(cfg.samples * cfg.classes);
            for _ in 0..cfg.samples {
                for (c, base) in clean.iter().enumerate() {
                    let mut x = base.clone();
                    add_noise(&mut x, cfg.noise, &mut noise_rng)?;
                    series.push(x);
                    labels.push(c);
                }
            }
            Ok(Dataset { series, labels })
        }
        DatasetKind::Imputation => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let series = (0..cfg.samples)
                .map(|_| {
                    let mut x = Mixture::random(&mut rng, cfg.t).render(cfg.t, cfg.m);
                    add_noise(&mut x, cfg.noise, &mut noise_rng)?;
                    Ok(x)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset {
                series,
                labels: Vec::new(),
            })
        }
    }
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:05}.csv")
}

/// Writes `samples/sample_NNNNN.csv` plus an `index.csv` listing files and,
/// for labelled data, their labels.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let samples = dir.join("samples");
    std::fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let mut index = String::from(if ds.labels.is_empty() { "file\n" } else { "file,label\n" });
    for (i, x) in ds.series.iter().enumerate() {
        let name = sample_name(i);
        write_csv(&samples.join(&name), x, None)?;
        match ds.labels.get(i) {
            Some(l) => index.push_str(&format!("samples/{name},{l}\n")),
            None => index.push_str(&format!("samples/{name}\n")),
        }
    }
    let path = dir.join("index.csv");
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Reads a directory written by [`write_dataset`]. Labels are `None` for
/// unlabelled data.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Timeseries>, Option<Vec<usize>>)> {
    let path = dir.join("index.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let labelled = header.trim() == "file,label";
    let mut series = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let file = parts.next().unwrap_or_default();
        series.push(read_csv(&dir.join(file))?);
        if labelled {
            let label = parts
                .next()
                .and_then(|l| l.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Parse(format!("{}: row {}: bad label", path.display(), row + 2)))?;
            labels.push(label);
        }
    }
    if series.is_empty() {
        return Err(Error::Parse(format!("{}: no samples listed", path.display())));
    }
    Ok((series, labelled.then_some(labels)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: DatasetKind) -> SynthConfig {
        SynthConfig {
            kind,
            t: 48,
            m: 2,
            classes: 3,
            samples: 5,
            noise: 0.1,
            seed: 3,
            kernel: 4,
        }
    }

    #[test]
    fn sizes_and_labels() {
        let ds = generate(&cfg(DatasetKind::Classification)).unwrap();
        assert_eq!(ds.series.len(), 15);
        assert_eq!(ds.labels, (0..15).map(|i| i % 3).collect::<Vec<_>>());
        assert!(ds.series.iter().all(|s| s.shape() == (48, 2)));
        let imp = generate(&cfg(DatasetKind::Imputation)).unwrap();
        assert_eq!(imp.series.len(), 5);
        assert!(imp.labels.is_empty());
    }

    #[test]
    fn single_class_uses_one_generator() {
        let c = SynthConfig {
            classes: 1,
            noise: 0.0,
            ..cfg(DatasetKind::Classification)
        };
        let ds = generate(&c).unwrap();
        assert!(ds.series.iter().all(|s| s == &ds.series[0]));
    }

    #[test]
    fn noiseless_nearest_centroid_is_perfect() {
        let c = SynthConfig {
            noise: 0.0,
            ..cfg(DatasetKind::Classification)
        };
        let ds = generate(&c).unwrap();
        let centroids: Vec<&Matrix> = (0..3).map(|k| &ds.series[k]).collect();
        for (x, &label) in ds.series.iter().zip(&ds.labels) {
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da = x.sub(centroids[a]).unwrap().frobenius_norm();
                    let db = x.sub(centroids[b]).unwrap().frobenius_norm();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, label);
        }
    }

    #[test]
    fn files_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate(&cfg(DatasetKind::Classification)).unwrap();
        write_dataset(&ds, a.path()).unwrap();
        write_dataset(&generate(&cfg(DatasetKind::Classification)).unwrap(), b.path()).unwrap();
        for name in ["index.csv", "samples/sample_00007.csv"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        let (series, labels) = load_dataset(a.path()).unwrap();
        assert_eq!(labels.unwrap(), ds.labels);
        assert_eq!(series[4].values(), &ds.series[4]);
    }

    #[test]
    fn short_series_rejected() {
        let c = SynthConfig {
            t: 7,
            ..cfg(DatasetKind::Imputation)
        };
        assert!(matches!(generate(&c), Err(Error::Config { field, .. }) if field == "t"));
    }
}
