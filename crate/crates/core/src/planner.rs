//! Batch size planning.
//!
//! Ground-truth batch sizes come from a binary search against a memory
//! probe. The `(L, N)` plane is then split into rectangles by a two-level
//! dynamic program (vertical strips over `L`, horizontal pieces over `N`),
//! and each rectangle gets its own least-squares fit of `1/B` on
//! `{L·N, L, 1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of samples a rectangle needs before it can be fitted.
pub const DEFAULT_MIN_POINTS: usize = 4;
pub const DEFAULT_MAX_BATCH: u64 = 1 << 16;
/// Fraction of the budget a batch may occupy.
pub const MEMORY_HEADROOM: f64 = 0.9;
const RIDGE_LAMBDA: f64 = 1e-8;
const EXACT_FIT_TOLERANCE: f64 = 1e-20;

/// Anything that can say whether a batch fits in memory.
pub trait MemoryProbe {
    fn fits(&self, l: usize, n: usize, b: u64) -> bool;
}

/// Analytic memory model:
/// `cost(L, N, B) = B·(c1·L·N + c2·L·d + c3·L + c4)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub budget: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub d: usize,
}

impl MemoryModel {
    pub fn new(budget: f64, c1: f64, c2: f64, c3: f64, c4: f64, d: usize) -> Result<Self> {
        if [c1, c2, c3, c4].iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument("memory coefficients must be positive".into()));
        }
        if !(budget >= 0.0 && budget.is_finite()) {
            return Err(Error::InvalidArgument(format!("budget {budget} must be finite and nonnegative")));
        }
        Ok(Self { budget, c1, c2, c3, c4, d })
    }

    /// Model of one encoder layer stack at dimension `d`: attention scores
    /// scale with `L·N`, activations with `L·d`.
    pub fn for_encoder(budget: f64, d: usize, layers: usize) -> Self {
        let layers = layers.max(1) as f64;
        Self {
            budget,
            c1: 2.0 * layers,
            c2: 12.0 * layers,
            c3: 4.0 * layers,
            c4: 1024.0,
            d,
        }
    }

    pub fn per_sample(&self, l: usize, n: usize) -> f64 {
        let (l, n) = (l as f64, n as f64);
        self.c1 * l * n + self.c2 * l * self.d as f64 + self.c3 * l + self.c4
    }

    pub fn cost(&self, l: usize, n: usize, b: u64) -> f64 {
        b as f64 * self.per_sample(l, n)
    }
}

impl MemoryProbe for MemoryModel {
    fn fits(&self, l: usize, n: usize, b: u64) -> bool {
        self.cost(l, n, b) <= MEMORY_HEADROOM * self.budget
    }
}

/// Largest `B ∈ [1, max_batch]` the probe accepts, or 0 when none fit.
/// Assumes feasibility is monotone in `B`.
pub fn binary_search_batch(probe: &dyn MemoryProbe, l: usize, n: usize, max_batch: u64) -> Result<u64> {
    if l < 1 || n < 1 || n > l {
        return Err(Error::Range(format!("(L={l}, N={n}) outside 1 <= N <= L")));
    }
    let (mut lo, mut hi) = (1u64, max_batch);
    let mut best = 0;
    while lo <= hi {
        let b_temp = lo + (hi - lo) / 2;
        if probe.fits(l, n, b_temp) {
            best = b_temp;
            lo = b_temp + 1;
        } else {
            hi = b_temp - 1;
        }
    }
    Ok(best)
}

/// One ground-truth point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub l: usize,
    pub n: usize,
    pub b: f64,
}

/// Structured sampling grid: `L` at `⌈2^(k/2)⌉` plus `l_max`, and
/// `N ∈ {1, L/8, L/4, L/2, L}`.
pub fn sample_grid(l_max: usize) -> Vec<(usize, usize)> {
    let mut ls = Vec::new();
    let mut k = 0i32;
    loop {
        let l = 2f64.powf(k as f64 / 2.0).ceil() as usize;
        if l > l_max {
            break;
        }
        ls.push(l);
        k += 1;
    }
    ls.push(l_max);
    ls.sort_unstable();
    ls.dedup();
    let mut out = Vec::new();
    for l in ls {
        let mut ns: Vec<usize> = [1, l / 8, l / 4, l / 2, l].into_iter().filter(|&n| n >= 1).collect();
        ns.sort_unstable();
        ns.dedup();
        out.extend(ns.into_iter().map(|n| (l, n)));
    }
    out
}

/// Probes every grid point for its maximal batch.
pub fn collect_samples(probe: &dyn MemoryProbe, l_max: usize, max_batch: u64) -> Result<Vec<Sample>> {
    if l_max < 1 {
        return Err(Error::InvalidArgument("l_max must be at least 1".into()));
    }
    sample_grid(l_max)
        .into_iter()
        .map(|(l, n)| {
            binary_search_batch(probe, l, n, max_batch).map(|b| Sample { l, n, b: b as f64 })
        })
        .collect()
}

/// Coefficients of `1/B = a·L·N + b·L + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub coef: [f64; 3],
    pub error: f64,
}

impl Fit {
    /// Real-valued predicted batch, `None` if the fitted reciprocal is not
    /// positive.
    pub fn predict(&self, l: usize, n: usize) -> Option<f64> {
        let (l, n) = (l as f64, n as f64);
        let inv = self.coef[0] * l * n + self.coef[1] * l + self.coef[2];
        (inv > 0.0).then(|| 1.0 / inv)
    }
}

/// Least-squares fit over `points`; infinite error below `min_points` or
/// when any fitted prediction is non-positive.
pub fn fit_subplane(points: &[Sample], min_points: usize) -> Fit {
    let infinite = Fit {
        coef: [0.0; 3],
        error: f64::INFINITY,
    };
    if points.len() < min_points.max(1) || points.iter().any(|p| !(p.b > 0.0)) {
        return infinite;
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| (a.l, a.n).cmp(&(b.l, b.n)).then(a.b.total_cmp(&b.b)));
    let rows: Vec<[f64; 3]> = pts
        .iter()
        .map(|p| [(p.l * p.n) as f64, p.l as f64, 1.0])
        .collect();
    let y: Vec<f64> = pts.iter().map(|p| 1.0 / p.b).collect();
    let coef = least_squares3(&rows, &y);
    let fit = Fit { coef, error: 0.0 };
    let mut error = 0.0;
    for p in &pts {
        match fit.predict(p.l, p.n) {
            Some(b) => error += (b - p.b) * (b - p.b),
            None => return infinite,
        }
    }
    // Roundoff-level residuals count as exact so ties favour fewer pieces.
    let scale: f64 = pts.iter().map(|p| p.b * p.b).sum();
    if error <= EXACT_FIT_TOLERANCE * scale {
        error = 0.0;
    }
    Fit { coef, error }
}

/// Column-normalized Householder QR; ridge-regularized normal equations
/// when the system is rank deficient.
fn least_squares3(rows: &[[f64; 3]], y: &[f64]) -> [f64; 3] {
    let m = rows.len();
    let mut norms = [0.0f64; 3];
    for r in rows {
        for c in 0..3 {
            norms[c] += r[c] * r[c];
        }
    }
    let norms = norms.map(|s| if s > 0.0 { s.sqrt() } else { 1.0 });
    let mut a: Vec<[f64; 3]> = rows.iter().map(|r| [r[0] / norms[0], r[1] / norms[1], r[2] / norms[2]]).collect();
    let mut b = y.to_vec();

    let mut rank_ok = m >= 3;
    if rank_ok {
        for k in 0..3 {
            let alpha = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
            if alpha < 1e-10 {
                rank_ok = false;
                break;
            }
            let sign = if a[k][k] >= 0.0 { 1.0 } else { -1.0 };
            let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
            v[0] += sign * alpha;
            let vv: f64 = v.iter().map(|x| x * x).sum();
            for c in k..3 {
                let s: f64 = (k..m).map(|i| v[i - k] * a[i][c]).sum::<f64>() * 2.0 / vv;
                for i in k..m {
                    a[i][c] -= s * v[i - k];
                }
            }
            let s: f64 = (k..m).map(|i| v[i - k] * b[i]).sum::<f64>() * 2.0 / vv;
            for i in k..m {
                b[i] -= s * v[i - k];
            }
        }
        let diag_max = (0..3).map(|k| a[k][k].abs()).fold(0.0, f64::max);
        if (0..3).any(|k| a[k][k].abs() < 1e-10 * diag_max.max(1.0)) {
            rank_ok = false;
        }
    }

    let z = if rank_ok {
        let mut z = [0.0; 3];
        for k in (0..3).rev() {
            let s: f64 = (k + 1..3).map(|c| a[k][c] * z[c]).sum();
            z[k] = (b[k] - s) / a[k][k];
        }
        z
    } else {
        ridge3(rows, y, &norms)
    };
    [z[0] / norms[0], z[1] / norms[1], z[2] / norms[2]]
}

fn ridge3(rows: &[[f64; 3]], y: &[f64], norms: &[f64; 3]) -> [f64; 3] {
    let mut g = [[0.0f64; 4]; 3];
    for (r, &t) in rows.iter().zip(y) {
        let x = [r[0] / norms[0], r[1] / norms[1], r[2] / norms[2]];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += x[i] * x[j];
            }
            g[i][3] += x[i] * t;
        }
    }
    for (i, row) in g.iter_mut().enumerate() {
        row[i] += RIDGE_LAMBDA;
    }
    // Gaussian elimination with partial pivoting on the 3x4 system.
    for k in 0..3 {
        let p = (k..3).max_by(|&i, &j| g[i][k].abs().total_cmp(&g[j][k].abs())).unwrap_or(k);
        g.swap(k, p);
        for i in k + 1..3 {
            let f = g[i][k] / g[k][k];
            for j in k..4 {
                g[i][j] -= f * g[k][j];
            }
        }
    }
    let mut z = [0.0; 3];
    for k in (0..3).rev() {
        let s: f64 = (k + 1..3).map(|c| g[k][c] * z[c]).sum();
        z[k] = (g[k][3] - s) / g[k][k];
    }
    z
}

/// Best error of one strip with its `(n_lo, n_hi, fit)` intervals.
type StripCuts = (f64, Vec<(usize, usize, Fit)>);

/// Axis-aligned piece of the plane: `l_lo ≤ L ≤ l_hi`, `n_lo ≤ N ≤ n_hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPlane {
    pub l_lo: usize,
    pub l_hi: usize,
    pub n_lo: usize,
    pub n_hi: usize,
    pub fit: Fit,
}

impl SubPlane {
    pub fn contains(&self, l: usize, n: usize) -> bool {
        (self.l_lo..=self.l_hi).contains(&l) && (self.n_lo..=self.n_hi).contains(&n)
    }
}

/// Fitted batch predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub l_max: usize,
    pub min_points: usize,
    pub max_batch: u64,
    pub samples: Vec<Sample>,
    pub partition: Vec<SubPlane>,
    pub total_error: f64,
}

/// Optimal guillotine partition (vertical strips, then horizontal pieces).
///
/// Cuts fall between consecutive distinct sample coordinates. Samples with
/// `B = 0` carry no fit information and are dropped.
pub fn dp_partition(samples: &[Sample], l_max: usize, min_points: usize) -> Result<BatchPlan> {
    dp_partition_with(samples, l_max, min_points, DEFAULT_MAX_BATCH)
}

pub fn dp_partition_with(samples: &[Sample], l_max: usize, min_points: usize, max_batch: u64) -> Result<BatchPlan> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to partition".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.n < 1 || s.n > s.l || s.l > l_max) {
        return Err(Error::Range(format!(
            "sample (L={}, N={}) outside 1 <= N <= L <= {l_max}",
            s.l, s.n
        )));
    }
    let usable: Vec<Sample> = samples.iter().copied().filter(|s| s.b > 0.0).collect();
    let mut ls: Vec<usize> = usable.iter().map(|s| s.l).collect();
    ls.sort_unstable();
    ls.dedup();
    if ls.is_empty() {
        return Err(Error::InvalidArgument("every sample has batch size 0".into()));
    }
    let k = ls.len();

    let mut strip_best: Vec<Vec<Option<StripCuts>>> = vec![vec![None; k + 1]; k + 1];
    let mut dp = vec![f64::INFINITY; k + 1];
    let mut cut = vec![0usize; k + 1];
    dp[0] = 0.0;
    for b in 1..=k {
        for a in 0..b {
            let (f, pieces) = best_strip(&usable, ls[a], ls[b - 1], min_points);
            let total = dp[a] + f;
            if total < dp[b] {
                dp[b] = total;
                cut[b] = a;
            }
            strip_best[a][b] = Some((f, pieces));
        }
    }
    if !dp[k].is_finite() {
        return Err(Error::InvalidArgument(format!(
            "no partition gives every piece at least {min_points} samples"
        )));
    }

    let mut strips = Vec::new();
    let mut b = k;
    while b > 0 {
        strips.push((cut[b], b));
        b = cut[b];
    }
    strips.reverse();

    let mut partition = Vec::new();
    for &(a, b) in &strips {
        let l_lo = if a == 0 { 1 } else { ls[a - 1] + 1 };
        let l_hi = if b == k { l_max } else { ls[b - 1] };
        let (_, pieces) = strip_best[a][b].take().expect("strip evaluated");
        let count = pieces.len();
        let mut n_lo = 1;
        for (idx, (_, n_top, fit)) in pieces.into_iter().enumerate() {
            let n_hi = if idx + 1 == count { l_hi } else { n_top };
            partition.push(SubPlane {
                l_lo,
                l_hi,
                n_lo,
                n_hi,
                fit,
            });
            n_lo = n_hi + 1;
        }
    }
    Ok(BatchPlan {
        l_max,
        min_points,
        max_batch,
        samples: samples.to_vec(),
        partition,
        total_error: dp[k],
    })
}

/// Inner DP over horizontal cuts for the strip `l_a ≤ L ≤ l_b`. Returns the
/// minimal strip error and its pieces as `(first N, last N, fit)`.
fn best_strip(samples: &[Sample], l_a: usize, l_b: usize, min_points: usize) -> (f64, Vec<(usize, usize, Fit)>) {
    let strip: Vec<Sample> = samples.iter().copied().filter(|s| s.l >= l_a && s.l <= l_b).collect();
    let mut ns: Vec<usize> = strip.iter().map(|s| s.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let m = ns.len();
    let mut g = vec![f64::INFINITY; m + 1];
    let mut cut = vec![0usize; m + 1];
    let mut fits: Vec<Vec<Option<Fit>>> = vec![vec![None; m + 1]; m + 1];
    g[0] = 0.0;
    for j in 1..=m {
        for i in 0..j {
            let piece: Vec<Sample> = strip.iter().copied().filter(|s| s.n >= ns[i] && s.n <= ns[j - 1]).collect();
            let fit = fit_subplane(&piece, min_points);
            let total = g[i] + fit.error;
            if total < g[j] {
                g[j] = total;
                cut[j] = i;
            }
            fits[i][j] = Some(fit);
        }
    }
    if !g[m].is_finite() {
        return (f64::INFINITY, Vec::new());
    }
    let mut pieces = Vec::new();
    let mut j = m;
    while j > 0 {
        let i = cut[j];
        pieces.push((ns[i], ns[j - 1], fits[i][j].expect("piece fitted")));
        j = i;
    }
    pieces.reverse();
    (g[m], pieces)
}

/// Predicted batch size at `(L, N)`: floored, at least 1, at most the plan's
/// maximum batch.
pub fn predict_batch(plan: &BatchPlan, l: usize, n: usize) -> Result<u64> {
    if l < 1 || n < 1 || n > l || l > plan.l_max {
        return Err(Error::Range(format!(
            "(L={l}, N={n}) outside 1 <= N <= L <= {}",
            plan.l_max
        )));
    }
    let piece = plan
        .partition
        .iter()
        .find(|p| p.contains(l, n))
        .ok_or_else(|| Error::Range(format!("(L={l}, N={n}) not covered by the plan")))?;
    Ok(match piece.fit.predict(l, n) {
        Some(b) => (b.floor().min(plan.max_batch as f64) as u64).max(1),
        None => plan.max_batch,
    })
}

/// Samples, partitions and fits in one call.
pub fn plan_batches(probe: &dyn MemoryProbe, l_max: usize, min_points: usize, max_batch: u64) -> Result<BatchPlan> {
    let samples = collect_samples(probe, l_max, max_batch)?;
    dp_partition_with(&samples, l_max, min_points, max_batch)
}

impl BatchPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Linear(f64, f64);
    impl MemoryProbe for Linear {
        fn fits(&self, _l: usize, _n: usize, b: u64) -> bool {
            b as f64 * self.0 <= MEMORY_HEADROOM * self.1
        }
    }

    fn linear_scan(probe: &dyn MemoryProbe, l: usize, n: usize, max_batch: u64) -> u64 {
        let mut best = 0;
        for b in 1..=max_batch {
            if probe.fits(l, n, b) {
                best = b;
            } else {
                break;
            }
        }
        best
    }

    #[test]
    fn search_examples() {
        assert_eq!(binary_search_batch(&Linear(10.0, 100.0), 1, 1, 1000).unwrap(), 9);
        assert_eq!(binary_search_batch(&Linear(10.0, 5.0), 1, 1, 1000).unwrap(), 0);
        assert_eq!(binary_search_batch(&Linear(1.0, 1e9), 1, 1, 64).unwrap(), 64);
        assert!(matches!(binary_search_batch(&Linear(1.0, 1.0), 2, 3, 8), Err(Error::Range(_))));
    }

    #[test]
    fn search_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mm = MemoryModel::new(
                rng.random_range(1e3..1e6),
                rng.random_range(0.1..4.0),
                rng.random_range(0.1..4.0),
                rng.random_range(0.1..4.0),
                rng.random_range(1.0..100.0),
                rng.random_range(1..64),
            )
            .unwrap();
            let l = rng.random_range(1..64);
            let n = rng.random_range(1..=l);
            assert_eq!(binary_search_batch(&mm, l, n, 4096).unwrap(), linear_scan(&mm, l, n, 4096));
        }
    }

    fn realizable(coef: [f64; 3], pts: &[(usize, usize)]) -> Vec<Sample> {
        pts.iter()
            .map(|&(l, n)| Sample {
                l,
                n,
                b: 1.0 / (coef[0] * (l * n) as f64 + coef[1] * l as f64 + coef[2]),
            })
            .collect()
    }

    #[test]
    fn realizable_fit_is_exact() {
        let coef = [2e-4, 3e-3, 1e-2];
        let pts = realizable(coef, &sample_grid(32));
        let fit = fit_subplane(&pts, 4);
        assert!(fit.error < 1e-12, "{}", fit.error);
        for (a, b) in fit.coef.iter().zip(coef) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn too_few_points_cost_infinity() {
        let pts = realizable([1e-3, 1e-3, 1e-3], &[(2, 1), (2, 2)]);
        assert_eq!(fit_subplane(&pts, 3).error, f64::INFINITY);
    }

    #[test]
    fn noisy_fit_error_is_its_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = realizable([1e-3, 2e-3, 5e-2], &sample_grid(24));
        for p in &mut pts {
            p.b *= 1.0 + 0.05 * (rng.random::<f64>() - 0.5);
        }
        let fit = fit_subplane(&pts, 4);
        let residual: f64 = pts
            .iter()
            .map(|p| {
                let pred = 1.0 / (fit.coef[0] * (p.l * p.n) as f64 + fit.coef[1] * p.l as f64 + fit.coef[2]);
                (pred - p.b).powi(2)
            })
            .sum();
        assert!((fit.error - residual).abs() <= 1e-9 * residual.max(1.0));
    }

    #[test]
    fn collinear_points_use_ridge() {
        // Every point has L = 4, so the L and 1 columns are parallel.
        let pts = realizable([1e-3, 2e-3, 0.0], &[(4, 1), (4, 2), (4, 3), (4, 4)]);
        let fit = fit_subplane(&pts, 4);
        assert!(fit.error < 1e-9, "{fit:?}");
    }

    fn assert_tiles(plan: &BatchPlan) {
        for l in 1..=plan.l_max {
            for n in 1..=l {
                let hits = plan.partition.iter().filter(|p| p.contains(l, n)).count();
                assert_eq!(hits, 1, "({l},{n}) covered {hits} times");
            }
        }
    }

    #[test]
    fn homogeneous_data_gives_one_piece() {
        let samples = realizable([1e-4, 1e-3, 1e-2], &sample_grid(64));
        let plan = dp_partition(&samples, 64, 4).unwrap();
        assert_eq!(plan.partition.len(), 1, "{:?}", plan.partition);
        assert_tiles(&plan);
    }

    #[test]
    fn planted_vertical_cut_is_found() {
        let l_max = 32;
        let grid = sample_grid(l_max);
        let samples: Vec<Sample> = grid
            .iter()
            .flat_map(|&(l, n)| {
                let coef = if l <= l_max / 2 { [1e-4, 1e-3, 1e-2] } else { [5e-3, 1e-4, 1e-1] };
                realizable(coef, &[(l, n)])
            })
            .collect();
        let plan = dp_partition(&samples, l_max, 4).unwrap();
        assert!(plan.total_error < 1e-9, "{}", plan.total_error);
        assert!(plan.partition.iter().any(|p| p.l_hi == l_max / 2), "{:?}", plan.partition);
        assert_tiles(&plan);
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(matches!(dp_partition(&[], 8, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn planned_batches_are_feasible_and_monotone() {
        let mm = MemoryModel::for_encoder(5e7, 16, 2);
        let plan = plan_batches(&mm, 64, DEFAULT_MIN_POINTS, DEFAULT_MAX_BATCH).unwrap();
        assert_tiles(&plan);
        for s in &plan.samples {
            let b = predict_batch(&plan, s.l, s.n).unwrap() as f64;
            assert!((b - s.b).abs() <= 1.0 + 0.05 * s.b, "({},{}) {b} vs {}", s.l, s.n, s.b);
        }
        for l in 1..=64 {
            for n in 1..=l {
                let b = predict_batch(&plan, l, n).unwrap();
                assert!(mm.cost(l, n, b) <= mm.budget, "({l},{n}) b={b}");
            }
        }
        let corner = predict_batch(&plan, 64, 64).unwrap();
        for l in 1..=64 {
            for n in 1..=l {
                assert!(predict_batch(&plan, l, n).unwrap() >= corner);
            }
        }
        assert!(matches!(predict_batch(&plan, 65, 1), Err(Error::Range(_))));
        assert!(matches!(predict_batch(&plan, 3, 4), Err(Error::Range(_))));
    }

    #[test]
    fn realizable_plan_is_monotone() {
        let samples = realizable([1e-4, 1e-3, 1e-2], &sample_grid(64));
        let plan = dp_partition(&samples, 64, 4).unwrap();
        for l in 1..=64 {
            for n in 1..=l {
                let b = predict_batch(&plan, l, n).unwrap();
                if n < l {
                    assert!(predict_batch(&plan, l, n + 1).unwrap() <= b);
                }
                if l < 64 {
                    assert!(predict_batch(&plan, l + 1, n).unwrap() <= b);
                }
            }
        }
    }

    #[test]
    fn plan_json_round_trip() {
        let mm = MemoryModel::for_encoder(1e6, 8, 1);
        let plan = plan_batches(&mm, 16, 4, 1024).unwrap();
        let back = BatchPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn grid_contents() {
        let g = sample_grid(8);
        assert_eq!(
            g,
            vec![(1, 1), (2, 1), (2, 2), (3, 1), (3, 3), (4, 1), (4, 2), (4, 4), (6, 1), (6, 3), (6, 6), (8, 1), (8, 2), (8, 4), (8, 8)]
        );
    }

    proptest! {
        #[test]
        fn search_equals_scan(budget in 1.0f64..1e5, c in 0.5f64..50.0, l in 1usize..40) {
            let mm = MemoryModel::new(budget, c, c, c, c, 4).unwrap();
            prop_assert_eq!(binary_search_batch(&mm, l, 1, 2000).unwrap(), linear_scan(&mm, l, 1, 2000));
        }
    }
}
