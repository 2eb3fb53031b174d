//! Adaptive group count per attention layer.
//!
//! The user fixes an error bound `ε > 1`. With keys inside a ball of radius
//! `R`, keeping every key within `d = ln(ε) / (2R)` of its representative
//! keeps every restored attention entry within a factor `ε` of the exact
//! one. Clusters whose union still satisfies that distance can be merged, so
//! after each epoch the scheduler counts mergeable clusters `D` and lowers
//! the group count with momentum: `N ← N − α·D`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::Grouping;
use crate::matrix::{euclidean, squared_norm, Matrix};

pub const DEFAULT_EPSILON: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 0.9;
/// Upper limit on the starting group count.
pub const MAX_INITIAL_GROUPS: usize = 1024;

/// Smoothed group count for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub epsilon: f64,
    pub alpha: f64,
    /// Real-valued group count; rounded when grouping.
    pub n_current: f64,
    /// Threshold computed by the most recent [`SchedulerState::step`].
    #[serde(with = "unbounded")]
    pub d_threshold: f64,
}

/// Stores an infinite threshold as JSON `null`.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_some(x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl SchedulerState {
    pub fn new(epsilon: f64, alpha: f64, initial_groups: usize) -> Result<Self> {
        if !(epsilon > 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must exceed 1")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} must lie in (0, 1]")));
        }
        Ok(Self {
            epsilon,
            alpha,
            n_current: initial_groups.max(1) as f64,
            d_threshold: f64::INFINITY,
        })
    }

    /// Starting group count for `n_windows` windows: a quarter, capped.
    pub fn initial_groups(n_windows: usize) -> usize {
        (n_windows / 4).clamp(1, MAX_INITIAL_GROUPS)
    }

    /// Integer group count to use for a sequence of `n_windows` windows.
    pub fn group_count(&self, n_windows: usize) -> usize {
        (self.n_current.round() as usize).clamp(1, n_windows.max(1))
    }

    /// Runs one merge scan over the groupings of every head of the layer and
    /// applies the momentum update. The layer shrinks by the smallest merge
    /// count found across heads.
    pub fn step(&mut self, heads: &[(&Grouping, &Matrix)]) -> Result<StepReport> {
        if heads.is_empty() {
            return Err(Error::InvalidArgument("scheduler step needs at least one head".into()));
        }
        let mut merged = usize::MAX;
        let mut threshold = f64::INFINITY;
        let mut radius = 0.0f64;
        for &(g, keys) in heads {
            g.validate(keys)?;
            let r = (0..keys.rows()).map(|i| squared_norm(keys.row(i)).sqrt()).fold(0.0, f64::max);
            let d = distance_threshold(self.epsilon, r);
            let clusters = summarize(g, keys)?;
            let scan = halved_merge_scan(&clusters, d);
            merged = merged.min(scan.merged());
            threshold = threshold.min(d);
            radius = radius.max(r);
        }
        let before = self.n_current;
        let merged = merged.min(before.floor() as usize);
        self.n_current = momentum_update(before, merged, self.alpha)?;
        self.d_threshold = threshold;
        Ok(StepReport {
            n_before: before,
            n_after: self.n_current,
            d_threshold: threshold,
            merged,
            radius,
        })
    }
}

/// Summary of one scheduler step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub n_before: f64,
    pub n_after: f64,
    pub d_threshold: f64,
    pub merged: usize,
    pub radius: f64,
}

/// `ln(ε) / (2R)`; unbounded when all keys sit at the origin.
pub fn distance_threshold(epsilon: f64, radius: f64) -> f64 {
    if radius > 0.0 {
        epsilon.ln() / (2.0 * radius)
    } else {
        f64::INFINITY
    }
}

/// Centroid, member count and spread (largest member distance) of a cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub centroid: Vec<f64>,
    pub size: usize,
    pub spread: f64,
}

impl Cluster {
    /// Summarizes explicit member points.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidArgument("cluster needs at least one point".into()))?;
        let dim = first.len();
        let mut centroid = vec![0.0; dim];
        for p in points {
            for (c, x) in centroid.iter_mut().zip(p) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= points.len() as f64);
        let spread = points.iter().map(|p| euclidean(p, &centroid)).fold(0.0, f64::max);
        Ok(Self {
            centroid,
            size: points.len(),
            spread,
        })
    }
}

/// Cluster summaries for every group of `g` over `keys`.
pub fn summarize(g: &Grouping, keys: &Matrix) -> Result<Vec<Cluster>> {
    g.validate(keys)?;
    let reps = g.representatives();
    let mut spread = vec![0.0f64; g.n_groups()];
    for (i, &b) in g.belong().iter().enumerate() {
        spread[b] = spread[b].max(euclidean(keys.row(i), reps.row(b)));
    }
    Ok((0..g.n_groups())
        .map(|k| Cluster {
            centroid: reps.row(k).to_vec(),
            size: g.counts()[k],
            spread: spread[k],
        })
        .collect())
}

/// Directed merge condition for the ordered pair `(a, b)`:
/// `max_{x∈a} ‖c_a − c_b‖ + ‖x − c_a‖ ≤ d`.
pub fn mergeable(a: &Cluster, b: &Cluster, d: f64) -> bool {
    euclidean(&a.centroid, &b.centroid) + a.spread <= d
}

/// Result of [`halved_merge_scan`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergeScan {
    /// Clusters placed in the first half, in scan order.
    pub first_half: Vec<usize>,
    /// `(marked cluster in the second half, its first-half partner)`.
    pub marked: Vec<(usize, usize)>,
}

impl MergeScan {
    /// Number of marked clusters, `D`.
    pub fn merged(&self) -> usize {
        self.marked.len()
    }
}

/// Splits clusters into two halves by ascending centroid norm and marks each
/// second-half cluster `j` for which some first-half cluster `i` satisfies
/// `‖c_i − c_j‖ + spread_i ≤ d` and `‖c_j − c_i‖ + spread_j ≤ d/2`.
/// The first-half partner with the lowest scan position is recorded.
pub fn halved_merge_scan(clusters: &[Cluster], d: f64) -> MergeScan {
    if clusters.len() < 2 {
        return MergeScan {
            first_half: (0..clusters.len()).collect(),
            marked: Vec::new(),
        };
    }
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    let norms: Vec<f64> = clusters.iter().map(|c| squared_norm(&c.centroid)).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let split = clusters.len().div_ceil(2);
    let (first, second) = order.split_at(split);

    let mut marked = Vec::new();
    for &j in second {
        let partner = first.iter().copied().find(|&i| {
            mergeable(&clusters[i], &clusters[j], d) && mergeable(&clusters[j], &clusters[i], d / 2.0)
        });
        if let Some(i) = partner {
            marked.push((j, i));
        }
    }
    MergeScan {
        first_half: first.to_vec(),
        marked,
    }
}

/// `N − α·D`, floored at one group.
pub fn momentum_update(n: f64, merged: usize, alpha: f64) -> Result<f64> {
    if merged as f64 > n {
        return Err(Error::Contract(format!("merged count {merged} exceeds group count {n}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must lie in (0, 1]")));
    }
    Ok((n - alpha * merged as f64).max(1.0))
}

/// One row of the per-epoch scheduler trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub layer: usize,
    pub n_before: f64,
    pub n_after: f64,
    pub d_threshold: f64,
    pub merged: usize,
}

/// Writes trace rows as CSV with a fixed header.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("epoch,layer,n_before,n_after,d_threshold,merged\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.layer, r.n_before, r.n_after, r.d_threshold, r.merged
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::kmeans_group;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point_cluster(c: &[f64]) -> Cluster {
        Cluster {
            centroid: c.to_vec(),
            size: 1,
            spread: 0.0,
        }
    }

    #[test]
    fn identical_singletons_merge() {
        let a = point_cluster(&[1.0, 2.0]);
        assert!(mergeable(&a, &a.clone(), 0.0));
        assert!(mergeable(&a, &a.clone(), 3.0));
    }

    #[test]
    fn distant_clusters_do_not_merge() {
        let a = point_cluster(&[0.0, 0.0]);
        let b = point_cluster(&[3.0, 4.0]);
        assert!(!mergeable(&a, &b, 4.99));
        assert!(mergeable(&a, &b, 5.0));
    }

    #[test]
    fn scan_marks_half_of_identical_clusters() {
        for n in 2..9 {
            let clusters: Vec<Cluster> = (0..n).map(|_| point_cluster(&[0.5, 0.5])).collect();
            let scan = halved_merge_scan(&clusters, 0.1);
            assert_eq!(scan.merged(), n / 2);
            for (j, _) in &scan.marked {
                assert!(!scan.first_half.contains(j));
            }
        }
    }

    #[test]
    fn scan_marks_nothing_when_far_apart() {
        let clusters: Vec<Cluster> = (0..6).map(|i| point_cluster(&[10.0 * i as f64, 0.0])).collect();
        assert_eq!(halved_merge_scan(&clusters, 1.0).merged(), 0);
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(momentum_update(100.0, 20, 0.5).unwrap(), 90.0);
        assert_eq!(momentum_update(37.0, 12, 1.0).unwrap(), 25.0);
        assert_eq!(momentum_update(37.0, 0, 0.3).unwrap(), 37.0);
        assert_eq!(momentum_update(2.0, 2, 1.0).unwrap(), 1.0);
        assert!(matches!(momentum_update(3.0, 4, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn default_threshold_uses_ln_two() {
        let s = SchedulerState::new(DEFAULT_EPSILON, DEFAULT_ALPHA, 8).unwrap();
        assert_eq!(distance_threshold(s.epsilon, 3.0), std::f64::consts::LN_2 / 6.0);
        assert_eq!(distance_threshold(2.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn zero_keys_merge_maximally() {
        let keys = Matrix::zeros(16, 2);
        let g = Grouping::from_assignment(&keys, (0..16).map(|i| i % 8).collect(), 8).unwrap();
        let mut s = SchedulerState::new(2.0, 1.0, 8).unwrap();
        let report = s.step(&[(&g, &keys)]).unwrap();
        assert_eq!(report.d_threshold, f64::INFINITY);
        assert_eq!(report.merged, 4);
        assert_eq!(s.n_current, 4.0);
    }

    #[test]
    fn tightening_keys_shrink_n_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let centers = Matrix::random_normal(4, 3, 3.0, &mut rng);
        let mut s = SchedulerState::new(2.0, 0.9, 12).unwrap();
        let mut history = vec![s.n_current];
        for epoch in 0..12 {
            // keys collapse towards four centers as training "converges"
            let noise = 0.5 / (1.0 + epoch as f64).powi(2);
            let rows: Vec<Vec<f64>> = (0..48)
                .map(|i| (0..3).map(|c| centers.get(i % 4, c) + noise * (rng.random::<f64>() - 0.5)).collect())
                .collect();
            let keys = Matrix::from_rows(&rows).unwrap();
            let g = kmeans_group(&keys, s.group_count(48), 2, epoch).unwrap();
            s.step(&[(&g, &keys)]).unwrap();
            history.push(s.n_current);
        }
        assert!(history.windows(2).all(|w| w[1] <= w[0]), "{history:?}");
        assert!(history.last().unwrap() < &history[0], "{history:?}");
    }

    #[test]
    fn initial_groups_policy() {
        assert_eq!(SchedulerState::initial_groups(3), 1);
        assert_eq!(SchedulerState::initial_groups(40), 10);
        assert_eq!(SchedulerState::initial_groups(100_000), MAX_INITIAL_GROUPS);
    }

    fn random_cluster(rng: &mut ChaCha8Rng, center: &[f64], radius: f64, size: usize) -> Vec<Vec<f64>> {
        (0..size)
            .map(|_| center.iter().map(|c| c + radius * (2.0 * rng.random::<f64>() - 1.0)).collect())
            .collect()
    }

    proptest! {
        /// Marked clusters together with their partner satisfy the pairwise
        /// merge condition, and every member then lies within `d` of the
        /// size-weighted merged center.
        #[test]
        fn scan_merges_are_contained(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 1.0;
            let points: Vec<Vec<Vec<f64>>> = (0..10)
                .map(|_| {
                    let center: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 1.5).collect();
                    let size = rng.random_range(1..5);
                    random_cluster(&mut rng, &center, 0.1, size)
                })
                .collect();
            let clusters: Vec<Cluster> = points.iter().map(|p| Cluster::from_points(p).unwrap()).collect();
            let scan = halved_merge_scan(&clusters, d);
            for &i in &scan.first_half {
                let group: Vec<usize> = std::iter::once(i)
                    .chain(scan.marked.iter().filter(|(_, p)| *p == i).map(|(j, _)| *j))
                    .collect();
                for &a in &group {
                    for &b in &group {
                        prop_assert!(mergeable(&clusters[a], &clusters[b], d + 1e-12));
                    }
                }
                let total: usize = group.iter().map(|&k| clusters[k].size).sum();
                let mut center = vec![0.0; 2];
                for &k in &group {
                    for (c, x) in center.iter_mut().zip(&clusters[k].centroid) {
                        *c += clusters[k].size as f64 * x / total as f64;
                    }
                }
                for &k in &group {
                    for p in &points[k] {
                        prop_assert!(euclidean(p, &center) <= d + 1e-12);
                    }
                }
            }
        }
    }
}
