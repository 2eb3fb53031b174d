//! Brute-force reference implementations for tests.
//!
//! Nothing here calls into the attention, grouping or planner kernels.
//! Sums run in double-double arithmetic so the oracles are strictly more
//! accurate than the paths they check.

use std::collections::HashMap;

use crate::attention::AttentionLayer;
use crate::error::{Error, Result};
use crate::grouping::Grouping;
use crate::matrix::Matrix;
use crate::planner::{MemoryProbe, Sample};

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl DoubleDouble {
    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn add_f64(self, b: f64) -> Self {
        let (s, e) = two_sum(self.hi, b);
        let (hi, lo) = two_sum(s, e + self.lo);
        Self { hi, lo }
    }

    pub fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (hi, lo) = two_sum(s, e + self.lo + b.lo);
        Self { hi, lo }
    }

    /// Adds the exact product `a·b`.
    pub fn add_product(self, a: f64, b: f64) -> Self {
        let p = a * b;
        let err = a.mul_add(b, -p);
        self.add(DoubleDouble { hi: p, lo: err })
    }

    pub fn mul_f64(self, b: f64) -> Self {
        let p = self.hi * b;
        let err = self.hi.mul_add(b, -p);
        let (hi, lo) = two_sum(p, err + self.lo * b);
        Self { hi, lo }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Accurate `Σ a_i·b_i`.
pub fn dd_dot(a: &[f64], b: &[f64]) -> DoubleDouble {
    a.iter().zip(b).fold(DoubleDouble::default(), |acc, (&x, &y)| acc.add_product(x, y))
}

/// `exp(hi + lo) ≈ exp(hi)·(1 + lo)`.
fn dd_exp(x: DoubleDouble) -> DoubleDouble {
    let e = x.hi.exp();
    DoubleDouble::new(e).add_product(e, x.lo)
}

fn dd_matmul(a: &Matrix, b: &Matrix) -> Vec<Vec<DoubleDouble>> {
    (0..a.rows())
        .map(|i| {
            (0..b.cols())
                .map(|j| {
                    (0..a.cols()).fold(DoubleDouble::default(), |acc, k| acc.add_product(a.get(i, k), b.get(k, j)))
                })
                .collect()
        })
        .collect()
}

/// Row softmax in double-double, stabilized by the row maximum.
fn dd_softmax_row(logits: &[DoubleDouble]) -> Vec<f64> {
    let max = logits.iter().map(|x| x.hi).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<DoubleDouble> = logits.iter().map(|x| dd_exp(x.add_f64(-max))).collect();
    let total = exps.iter().fold(DoubleDouble::default(), |acc, &e| acc.add(e));
    exps.iter().map(|e| dd_div(*e, total)).collect()
}

fn dd_div(a: DoubleDouble, b: DoubleDouble) -> f64 {
    let q = a.hi / b.hi;
    // one Newton correction: q + (a − q·b)/b
    let r = a.add(DoubleDouble::new(-q).mul_f64(b.hi)).add_product(-q, b.lo);
    q + r.value() / b.hi
}

/// Multi-head attention computed entry by entry. Returns the concatenated
/// head outputs and one `n × n` weight matrix per head.
pub fn oracle_attention(h: &Matrix, layer: &AttentionLayer) -> Result<(Matrix, Vec<Matrix>)> {
    if h.cols() != layer.w_q.rows() {
        return Err(Error::Shape {
            op: "oracle_attention",
            left: h.shape(),
            right: layer.w_q.shape(),
        });
    }
    let q = dd_matmul(h, &layer.w_q);
    let k = dd_matmul(h, &layer.w_k);
    let v = dd_matmul(h, &layer.w_v);
    let n = h.rows();
    let dk = layer.w_q.cols() / layer.heads;
    let dv = layer.w_v.cols() / layer.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Matrix::zeros(n, layer.w_v.cols());
    let mut weights = Vec::with_capacity(layer.heads);
    for head in 0..layer.heads {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            let logits: Vec<DoubleDouble> = (0..n)
                .map(|j| {
                    let mut s = DoubleDouble::default();
                    for c in head * dk..(head + 1) * dk {
                        s = s.add_product(q[i][c].hi, k[j][c].hi);
                        s = s.add_product(q[i][c].hi, k[j][c].lo);
                        s = s.add_product(q[i][c].lo, k[j][c].hi);
                    }
                    s.mul_f64(scale)
                })
                .collect();
            let row = dd_softmax_row(&logits);
            for (j, w) in row.into_iter().enumerate() {
                a.set(i, j, w);
            }
        }
        for i in 0..n {
            for c in 0..dv {
                let col = head * dv + c;
                let s = (0..n).fold(DoubleDouble::default(), |acc, j| {
                    acc.add_product(a.get(i, j), v[j][col].hi).add_product(a.get(i, j), v[j][col].lo)
                });
                out.set(i, col, s.value());
            }
        }
        weights.push(a);
    }
    Ok((out, weights))
}

/// Expands group scores to all `n` columns via the assignment, then applies
/// an ordinary softmax.
pub fn oracle_restore_softmax(group_scores: &Matrix, g: &Grouping) -> Result<Matrix> {
    if group_scores.cols() != g.n_groups() {
        return Err(Error::Shape {
            op: "oracle_restore_softmax",
            left: group_scores.shape(),
            right: (group_scores.rows(), g.n_groups()),
        });
    }
    let n = g.n_windows();
    let mut out = Matrix::zeros(group_scores.rows(), n);
    for i in 0..group_scores.rows() {
        let logits: Vec<DoubleDouble> = g
            .belong()
            .iter()
            .map(|&b| DoubleDouble::new(group_scores.get(i, b)))
            .collect();
        for (j, w) in dd_softmax_row(&logits).into_iter().enumerate() {
            out.set(i, j, w);
        }
    }
    Ok(out)
}

/// Largest feasible `B` found by trying `1, 2, …` in turn.
pub fn linear_scan_batch(probe: &dyn MemoryProbe, l: usize, n: usize, max_batch: u64) -> u64 {
    let mut best = 0;
    for b in 1..=max_batch {
        if !probe.fits(l, n, b) {
            break;
        }
        best = b;
    }
    best
}

/// Largest `L_max` the exhaustive partition search accepts.
pub const MAX_EXHAUSTIVE_L: usize = 6;

/// Minimal total cost over every vertical-then-horizontal guillotine
/// partition, with cuts between consecutive distinct sample coordinates.
/// Costs are summed left to right, pieces within a strip first.
pub fn oracle_partition_search<F>(samples: &[Sample], l_max: usize, cost: F) -> Result<f64>
where
    F: Fn(&[Sample]) -> f64,
{
    if l_max > MAX_EXHAUSTIVE_L {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search refuses L_max = {l_max} > {MAX_EXHAUSTIVE_L}"
        )));
    }
    let usable: Vec<Sample> = samples.iter().copied().filter(|s| s.b > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("no usable samples".into()));
    }
    let mut ls: Vec<usize> = usable.iter().map(|s| s.l).collect();
    ls.sort_unstable();
    ls.dedup();

    let mut memo: HashMap<(usize, usize, usize, usize), f64> = HashMap::new();
    let mut best = f64::INFINITY;
    for strips in compositions(ls.len()) {
        // Every strip's own list of horizontal partitions.
        let mut options: Vec<Vec<Vec<f64>>> = Vec::new();
        for &(a, b) in &strips {
            let (l_lo, l_hi) = (ls[a], ls[b - 1]);
            let strip: Vec<Sample> = usable.iter().copied().filter(|s| s.l >= l_lo && s.l <= l_hi).collect();
            let mut ns: Vec<usize> = strip.iter().map(|s| s.n).collect();
            ns.sort_unstable();
            ns.dedup();
            let mut strip_options = Vec::new();
            for pieces in compositions(ns.len()) {
                let costs = pieces
                    .iter()
                    .map(|&(i, j)| {
                        *memo.entry((l_lo, l_hi, ns[i], ns[j - 1])).or_insert_with(|| {
                            let piece: Vec<Sample> =
                                strip.iter().copied().filter(|s| s.n >= ns[i] && s.n <= ns[j - 1]).collect();
                            cost(&piece)
                        })
                    })
                    .collect();
                strip_options.push(costs);
            }
            options.push(strip_options);
        }
        let mut choice = vec![0usize; options.len()];
        loop {
            let mut total = 0.0;
            for (s, &c) in choice.iter().enumerate() {
                let strip_total = options[s][c].iter().fold(0.0, |acc, &x| acc + x);
                total += strip_total;
            }
            if total < best {
                best = total;
            }
            let mut pos = 0;
            loop {
                if pos == choice.len() {
                    break;
                }
                choice[pos] += 1;
                if choice[pos] < options[pos].len() {
                    break;
                }
                choice[pos] = 0;
                pos += 1;
            }
            if pos == choice.len() {
                break;
            }
        }
    }
    Ok(best)
}

/// All ways to cut `0..k` into consecutive nonempty ranges.
fn compositions(k: usize) -> Vec<Vec<(usize, usize)>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    (0..1u32 << (k - 1))
        .map(|bits| {
            let mut parts = Vec::new();
            let mut start = 0;
            for pos in 1..k {
                if bits & (1 << (pos - 1)) != 0 {
                    parts.push((start, pos));
                    start = pos;
                }
            }
            parts.push((start, k));
            parts
        })
        .collect()
}

/// Optimal k-means objective by enumerating every assignment of at most ten
/// points into `k` nonempty clusters.
pub fn brute_force_kmeans(points: &Matrix, k: usize) -> Result<(f64, Vec<usize>)> {
    let n = points.rows();
    if k == 0 || k > n || n > 10 {
        return Err(Error::InvalidArgument(format!("brute force needs 1 <= k <= n <= 10 (n={n}, k={k})")));
    }
    let mut best = (f64::INFINITY, Vec::new());
    let mut assign = vec![0usize; n];
    loop {
        let mut used = vec![false; k];
        assign.iter().for_each(|&a| used[a] = true);
        if used.iter().all(|&u| u) {
            let mut objective = 0.0;
            for c in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
                for d in 0..points.cols() {
                    let mean = members.iter().map(|&i| points.get(i, d)).sum::<f64>() / members.len() as f64;
                    objective += members.iter().map(|&i| (points.get(i, d) - mean).powi(2)).sum::<f64>();
                }
            }
            if objective < best.0 {
                best = (objective, assign.clone());
            }
        }
        let mut pos = 0;
        while pos < n {
            assign[pos] += 1;
            if assign[pos] < k {
                break;
            }
            assign[pos] = 0;
            pos += 1;
        }
        if pos == n {
            break;
        }
    }
    Ok(best)
}

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub main: f64,
    pub oracle: f64,
    pub abs_dev: f64,
    pub rel_dev: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when the absolute deviation is within `tolerance`.
    pub fn compare(case: impl Into<String>, main: f64, oracle: f64, tolerance: f64) -> Self {
        let abs_dev = (main - oracle).abs();
        let rel_dev = abs_dev / oracle.abs().max(f64::MIN_POSITIVE);
        Self {
            case: case.into(),
            main,
            oracle,
            abs_dev,
            rel_dev,
            pass: abs_dev <= tolerance || main == oracle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{group_softmax, restore_full, vanilla_attention};
    use crate::grouping::kmeans_group;
    use crate::planner::{binary_search_batch, dp_partition, fit_subplane, MemoryModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn double_double_recovers_cancellation() {
        let s = DoubleDouble::new(1e16).add_f64(1.0).add_f64(-1e16);
        assert_eq!(s.value(), 1.0);
        assert_eq!(dd_dot(&[1e8, 1.0, -1e8], &[1e8, 1.0, 1e8]).value(), 1.0);
    }

    #[test]
    fn single_window_attends_to_itself() {
        let layer = AttentionLayer::random(4, 4, 4, 1, &mut rng(1)).unwrap();
        let h = Matrix::random_normal(1, 4, 1.0, &mut rng(2));
        let (o, a) = oracle_attention(&h, &layer).unwrap();
        assert_eq!(a[0].data(), &[1.0]);
        let v = h.matmul(&layer.w_v).unwrap();
        assert!(o.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn agrees_with_attention_module() {
        let layer = AttentionLayer::random(6, 4, 6, 2, &mut rng(3)).unwrap();
        let h = Matrix::random_normal(8, 6, 1.0, &mut rng(4));
        let (o, a) = oracle_attention(&h, &layer).unwrap();
        let (o2, a2) = vanilla_attention(&h, &layer).unwrap();
        assert!(o.max_abs_diff(&o2).unwrap() < 1e-10);
        for (x, y) in a.iter().zip(&a2) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-10);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let layer = AttentionLayer::random(4, 4, 4, 1, &mut rng(5)).unwrap();
        let h = Matrix::random_normal(6, 4, 1.0, &mut rng(6));
        let perm = [3, 0, 5, 1, 4, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| h.row(p).to_vec()).collect();
        let hp = Matrix::from_rows(&rows).unwrap();
        let (o, _) = oracle_attention(&h, &layer).unwrap();
        let (op, _) = oracle_attention(&hp, &layer).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((op.get(i, c) - o.get(p, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn restore_softmax_with_unit_counts_is_softmax() {
        let keys = Matrix::random_normal(5, 2, 1.0, &mut rng(7));
        let g = Grouping::singletons(&keys);
        let p = Matrix::random_normal(3, 5, 2.0, &mut rng(8));
        let a = oracle_restore_softmax(&p, &g).unwrap();
        assert!(a.max_abs_diff(&p.softmax_rows()).unwrap() < 1e-15);
        for i in 0..3 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn restore_softmax_matches_group_path() {
        let keys = Matrix::random_normal(12, 3, 1.0, &mut rng(9));
        let g = kmeans_group(&keys, 4, 2, 1).unwrap();
        let p = Matrix::random_normal(5, 4, 3.0, &mut rng(10));
        let oracle = oracle_restore_softmax(&p, &g).unwrap();
        let main = restore_full(&group_softmax(&p, g.counts()).unwrap(), &g).unwrap();
        assert!(oracle.max_abs_diff(&main).unwrap() <= 1e-12);
    }

    #[test]
    fn linear_scan_matches_binary_search() {
        let mm = MemoryModel::new(1e4, 1.0, 1.0, 1.0, 5.0, 8).unwrap();
        for l in 1..20 {
            assert_eq!(linear_scan_batch(&mm, l, 1, 5000), binary_search_batch(&mm, l, 1, 5000).unwrap());
        }
    }

    fn random_samples(r: &mut ChaCha8Rng, l_max: usize) -> Vec<Sample> {
        let coef = [r.random_range(1e-4..1e-2), r.random_range(1e-4..1e-2), r.random_range(1e-3..1e-1)];
        let mut out = Vec::new();
        for l in 1..=l_max {
            for n in 1..=l {
                let exact = 1.0 / (coef[0] * (l * n) as f64 + coef[1] * l as f64 + coef[2]);
                out.push(Sample { l, n, b: (exact * (1.0 + 0.3 * r.random::<f64>())).floor() });
            }
        }
        out
    }

    #[test]
    fn exhaustive_search_equals_dp() {
        let mut r = rng(11);
        for l_max in 4..=6 {
            for _ in 0..3 {
                let samples = random_samples(&mut r, l_max);
                let plan = dp_partition(&samples, l_max, 4).unwrap();
                let best = oracle_partition_search(&samples, l_max, |s| fit_subplane(s, 4).error).unwrap();
                assert_eq!(plan.total_error, best);
            }
        }
    }

    #[test]
    fn exhaustive_search_refuses_large_planes() {
        assert!(oracle_partition_search(&[Sample { l: 1, n: 1, b: 1.0 }], 7, |_| 0.0).is_err());
    }

    #[test]
    fn exhaustive_uniform_data_has_zero_error() {
        let samples: Vec<Sample> = (1..=5)
            .flat_map(|l| (1..=l).map(move |n| Sample { l, n, b: 1.0 / (1e-3 * (l * n) as f64 + 1e-2) }))
            .collect();
        let best = oracle_partition_search(&samples, 5, |s| fit_subplane(s, 4).error).unwrap();
        assert_eq!(best, 0.0);
    }

    #[test]
    fn compositions_count() {
        for k in 1..7 {
            assert_eq!(compositions(k).len(), 1 << (k - 1));
        }
    }

    #[test]
    fn brute_force_kmeans_two_pairs() {
        let p = Matrix::from_rows(&[[0.0], [0.1], [5.0], [5.2]]).unwrap();
        let (obj, assign) = brute_force_kmeans(&p, 2).unwrap();
        assert!((obj - (0.005 + 0.02)).abs() < 1e-12);
        assert_eq!(assign[0], assign[1]);
        assert_eq!(assign[2], assign[3]);
        assert_ne!(assign[0], assign[2]);
    }

    #[test]
    fn report_tolerance() {
        assert!(OracleReport::compare("a", 1.0, 1.0 + 1e-13, 1e-12).pass);
        assert!(!OracleReport::compare("b", 1.0, 1.1, 1e-12).pass);
    }
}
