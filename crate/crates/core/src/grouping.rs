//! K-means grouping of key vectors.
//!
//! Distances are computed as `‖v‖² + ‖c‖² − 2 v·c` so the dominant cost is
//! a single `keys · centersᵀ` product per iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{euclidean, squared_norm, Matrix};

/// Default number of Lloyd iterations; a few are enough for attention.
pub const DEFAULT_KMEANS_ITERS: usize = 2;

/// Assignment of `n` windows to `N` groups together with the centroid of
/// each group and the distance statistics used by the error bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    belong: Vec<usize>,
    counts: Vec<usize>,
    representatives: Matrix,
    max_dist: f64,
    radius: f64,
}

impl Grouping {
    /// Builds a grouping from an assignment vector, using member means as
    /// representatives. Every group must be non-empty.
    pub fn from_assignment(keys: &Matrix, belong: Vec<usize>, n_groups: usize) -> Result<Self> {
        if belong.len() != keys.rows() {
            return Err(Error::InvalidGrouping(format!(
                "{} assignments for {} keys",
                belong.len(),
                keys.rows()
            )));
        }
        if let Some(&bad) = belong.iter().find(|&&b| b >= n_groups) {
            return Err(Error::InvalidGrouping(format!(
                "assignment {bad} outside 0..{n_groups}"
            )));
        }
        let (representatives, counts) = centroids(keys, &belong, n_groups);
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidGrouping(format!("group {k} is empty")));
        }
        let (max_dist, radius) = stats(keys, &belong, &representatives);
        Ok(Self {
            belong,
            counts,
            representatives,
            max_dist,
            radius,
        })
    }

    /// Every key in its own group.
    pub fn singletons(keys: &Matrix) -> Self {
        let n = keys.rows();
        Self::from_assignment(keys, (0..n).collect(), n).expect("singleton grouping is valid")
    }

    pub fn n_groups(&self) -> usize {
        self.counts.len()
    }

    pub fn n_windows(&self) -> usize {
        self.belong.len()
    }

    pub fn belong(&self) -> &[usize] {
        &self.belong
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `N × d_k` centroid matrix.
    pub fn representatives(&self) -> &Matrix {
        &self.representatives
    }

    /// Largest key-to-representative distance.
    pub fn max_dist(&self) -> f64 {
        self.max_dist
    }

    /// Largest key norm.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Indices of the windows in group `k`.
    pub fn members(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.belong
            .iter()
            .enumerate()
            .filter(move |(_, &b)| b == k)
            .map(|(i, _)| i)
    }

    /// Checks the structural invariants against the keys it was built from.
    pub fn validate(&self, keys: &Matrix) -> Result<()> {
        if self.belong.len() != keys.rows() || self.representatives.cols() != keys.cols() {
            return Err(Error::InvalidGrouping(format!(
                "grouping over {} windows of dim {} used with keys {:?}",
                self.belong.len(),
                self.representatives.cols(),
                keys.shape()
            )));
        }
        let mut counts = vec![0usize; self.n_groups()];
        for &b in &self.belong {
            if b >= counts.len() {
                return Err(Error::InvalidGrouping(format!("assignment {b} out of range")));
            }
            counts[b] += 1;
        }
        if counts != self.counts {
            return Err(Error::InvalidGrouping("counts disagree with assignments".into()));
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidGrouping(format!("group {k} is empty")));
        }
        Ok(())
    }
}

fn centroids(keys: &Matrix, belong: &[usize], n_groups: usize) -> (Matrix, Vec<usize>) {
    let mut sums = Matrix::zeros(n_groups, keys.cols());
    let mut counts = vec![0usize; n_groups];
    for (i, &b) in belong.iter().enumerate() {
        counts[b] += 1;
        for (s, v) in sums.row_mut(b).iter_mut().zip(keys.row(i)) {
            *s += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = 1.0 / c as f64;
            sums.row_mut(k).iter_mut().for_each(|s| *s *= inv);
        }
    }
    (sums, counts)
}

fn stats(keys: &Matrix, belong: &[usize], reps: &Matrix) -> (f64, f64) {
    let mut max_dist = 0.0f64;
    let mut radius = 0.0f64;
    for (i, &b) in belong.iter().enumerate() {
        max_dist = max_dist.max(euclidean(keys.row(i), reps.row(b)));
        radius = radius.max(squared_norm(keys.row(i)).sqrt());
    }
    (max_dist, radius)
}

/// Recomputes `(max_dist, radius)` of `g` over `keys` by a direct scan.
pub fn grouping_stats(g: &Grouping, keys: &Matrix) -> Result<(f64, f64)> {
    g.validate(keys)?;
    Ok(stats(keys, &g.belong, &g.representatives))
}

/// Squared distances between every point and every center via
/// `‖v‖² + ‖c‖² − 2 v·c`, clamped at zero.
pub fn product_sq_distances(points: &Matrix, centers: &Matrix) -> Result<Matrix> {
    let mut cross = points.matmul_nt(centers)?;
    let pn: Vec<f64> = (0..points.rows()).map(|i| squared_norm(points.row(i))).collect();
    let cn: Vec<f64> = (0..centers.rows()).map(|k| squared_norm(centers.row(k))).collect();
    for (i, &p) in pn.iter().enumerate() {
        for (o, &c) in cross.row_mut(i).iter_mut().zip(&cn) {
            *o = (p + c - 2.0 * *o).max(0.0);
        }
    }
    Ok(cross)
}

/// Groups `keys` into `n_groups` clusters with k-means++ seeding followed by
/// at most `iters` Lloyd iterations.
pub fn kmeans_group(keys: &Matrix, n_groups: usize, iters: usize, seed: u64) -> Result<Grouping> {
    kmeans_group_traced(keys, n_groups, iters, seed).map(|(g, _)| g)
}

/// Like [`kmeans_group`], also returning the clustering objective (sum of
/// squared member-to-centroid distances) after each completed iteration.
pub fn kmeans_group_traced(
    keys: &Matrix,
    n_groups: usize,
    iters: usize,
    seed: u64,
) -> Result<(Grouping, Vec<f64>)> {
    let n = keys.rows();
    if n_groups < 1 || n_groups > n {
        return Err(Error::InvalidArgument(format!(
            "group count {n_groups} must lie in 1..={n}"
        )));
    }
    if iters < 1 {
        return Err(Error::InvalidArgument("k-means needs at least one iteration".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(keys, n_groups, &mut rng)?;
    let mut belong = vec![0usize; n];
    let mut history = Vec::with_capacity(iters);

    for _ in 0..iters {
        assign(keys, &centers, &mut belong)?;
        let (c, counts) = centroids(keys, &belong, n_groups);
        centers = c;
        repair_empty(keys, &mut belong, &mut centers, counts);
        history.push(objective(keys, &belong, &centers));
    }

    let g = Grouping::from_assignment(keys, belong, n_groups)?;
    Ok((g, history))
}

fn plus_plus_init(keys: &Matrix, n_groups: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let n = keys.rows();
    let mut chosen = Vec::with_capacity(n_groups);
    let mut is_chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;

    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(keys.row(i), keys.row(first)))
        .collect();
    while chosen.len() < n_groups {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // all remaining points coincide with a chosen center
            (0..n).find(|&i| !is_chosen[i]).expect("fewer centers than points")
        };
        chosen.push(pick);
        is_chosen[pick] = true;
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(keys.row(i), keys.row(pick)));
        }
    }

    let rows: Vec<&[f64]> = chosen.iter().map(|&i| keys.row(i)).collect();
    Matrix::from_rows(&rows)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(keys: &Matrix, centers: &Matrix, belong: &mut [usize]) -> Result<()> {
    let dist = product_sq_distances(keys, centers)?;
    for (i, b) in belong.iter_mut().enumerate() {
        let row = dist.row(i);
        let mut best = 0;
        for (k, &d) in row.iter().enumerate().skip(1) {
            // strict comparison keeps the lowest index on ties
            if d < row[best] {
                best = k;
            }
        }
        *b = best;
    }
    Ok(())
}

/// Moves the point farthest from its centroid in the largest cluster into
/// each empty cluster.
fn repair_empty(keys: &Matrix, belong: &mut [usize], centers: &mut Matrix, mut counts: Vec<usize>) {
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..counts.len())
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("at least one group");
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &b) in belong.iter().enumerate() {
            if b == largest {
                let d = sq_dist(keys.row(i), centers.row(largest));
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let moved = far.expect("largest group has members");
        belong[moved] = empty;
        let (c, cnt) = centroids(keys, belong, counts.len());
        *centers = c;
        counts = cnt;
    }
}

fn objective(keys: &Matrix, belong: &[usize], centers: &Matrix) -> f64 {
    belong
        .iter()
        .enumerate()
        .map(|(i, &b)| sq_dist(keys.row(i), centers.row(b)))
        .sum()
}
