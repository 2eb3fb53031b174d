//! Scaled dot-product attention and its grouped approximation.
//!
//! The grouped path scores each query against `N` group representatives
//! instead of all `n` keys. Value vectors are summed per group beforehand,
//! and the softmax denominator counts every group `COUNT_k` times, so no
//! `n × n` matrix is ever formed. When every key equals its group's
//! representative the result is identical to full attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::Grouping;
use crate::matrix::{softmax_in_place, Matrix};
use crate::tape::{BackwardRule, GradTape, Var};

/// Projection weights of one multi-head self-attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, heads: usize) -> Result<Self> {
        if w_q.shape() != w_k.shape() || w_q.rows() != w_v.rows() {
            return Err(Error::Shape {
                op: "attention_layer",
                left: w_q.shape(),
                right: w_k.shape(),
            });
        }
        if heads == 0 || !w_q.cols().is_multiple_of(heads) || !w_v.cols().is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "{heads} heads do not divide d_k = {} and d_v = {}",
                w_q.cols(),
                w_v.cols()
            )));
        }
        Ok(Self { w_q, w_k, w_v, heads })
    }

    /// Xavier-style random initialization.
    pub fn random<R: Rng + ?Sized>(d_model: usize, d_k: usize, d_v: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let std_k = (2.0 / (d_model + d_k) as f64).sqrt();
        let std_v = (2.0 / (d_model + d_v) as f64).sqrt();
        Self::new(
            Matrix::random_normal(d_model, d_k, std_k, rng),
            Matrix::random_normal(d_model, d_k, std_k, rng),
            Matrix::random_normal(d_model, d_v, std_v, rng),
            heads,
        )
    }

    pub fn head_dim_k(&self) -> usize {
        self.w_q.cols() / self.heads
    }

    pub fn head_dim_v(&self) -> usize {
        self.w_v.cols() / self.heads
    }

    /// `1/√(per-head d_k)`, shared by the vanilla and grouped paths.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim_k() as f64).sqrt()
    }

    /// Returns `(Q, K, V)` for input `h`.
    pub fn project(&self, h: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        Ok((h.matmul(&self.w_q)?, h.matmul(&self.w_k)?, h.matmul(&self.w_v)?))
    }

    /// Per-head column blocks of `(Q, K, V)`.
    pub fn split_heads(&self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Vec<(Matrix, Matrix, Matrix)>> {
        let (dk, dv) = (self.head_dim_k(), self.head_dim_v());
        (0..self.heads)
            .map(|h| {
                Ok((
                    q.slice_cols(h * dk, (h + 1) * dk)?,
                    k.slice_cols(h * dk, (h + 1) * dk)?,
                    v.slice_cols(h * dv, (h + 1) * dv)?,
                ))
            })
            .collect()
    }
}

/// Result of [`group_attention`].
#[derive(Clone, Debug)]
pub struct GroupAttentionOutput {
    /// `n × d_v` output embeddings.
    pub output: Matrix,
    /// Per-head `n × N` group score matrices.
    pub scores: Vec<Matrix>,
    /// Per-head groupings used for the scores.
    pub groupings: Vec<Grouping>,
}

/// Single-head softmax attention: returns `(O, A)`.
pub fn attention_head(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> Result<(Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention_head",
            left: k.shape(),
            right: v.shape(),
        });
    }
    let mut scores = q.matmul_nt(k)?;
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        row.iter_mut().for_each(|x| *x *= scale);
        softmax_in_place(row);
    }
    let out = scores.matmul(v)?;
    Ok((out, scores))
}

/// Full self-attention. Returns the concatenated head outputs and one
/// `n × n` attention matrix per head.
pub fn vanilla_attention(h: &Matrix, layer: &AttentionLayer) -> Result<(Matrix, Vec<Matrix>)> {
    let (q, k, v) = layer.project(h)?;
    let mut outs = Vec::with_capacity(layer.heads);
    let mut weights = Vec::with_capacity(layer.heads);
    for (qh, kh, vh) in layer.split_heads(&q, &k, &v)? {
        let (o, a) = attention_head(&qh, &kh, &vh, layer.scale())?;
        outs.push(o);
        weights.push(a);
    }
    let refs: Vec<&Matrix> = outs.iter().collect();
    Ok((Matrix::concat_cols(&refs)?, weights))
}

fn check_counts(counts: &[usize]) -> Result<()> {
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidGrouping(format!("group {k} has count 0")));
    }
    Ok(())
}

/// Softmax where column `k` stands for `counts[k]` identical entries:
/// `Ã[i,k] = exp(P̃[i,k]) / Σ_j counts[j]·exp(P̃[i,j])`.
pub fn group_softmax(scores: &Matrix, counts: &[usize]) -> Result<Matrix> {
    if counts.len() != scores.cols() {
        return Err(Error::Shape {
            op: "group_softmax",
            left: scores.shape(),
            right: (1, counts.len()),
        });
    }
    check_counts(counts)?;
    let mut out = scores.clone();
    for r in 0..out.rows() {
        group_softmax_row(out.row_mut(r), counts);
    }
    Ok(out)
}

fn group_softmax_row(row: &mut [f64], counts: &[usize]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (v, &c) in row.iter_mut().zip(counts) {
        *v = (*v - max).exp();
        total += c as f64 * *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Expands an `n × N` group score matrix to `n × n` by copying column
/// `BELONG_j` into column `j`.
pub fn restore_full(group_scores: &Matrix, g: &Grouping) -> Result<Matrix> {
    if group_scores.cols() != g.n_groups() {
        return Err(Error::Shape {
            op: "restore_full",
            left: group_scores.shape(),
            right: (g.n_windows(), g.n_groups()),
        });
    }
    let n = g.n_windows();
    let mut out = Matrix::zeros(group_scores.rows(), n);
    for r in 0..group_scores.rows() {
        let src = group_scores.row(r);
        for (o, &b) in out.row_mut(r).iter_mut().zip(g.belong()) {
            *o = src[b];
        }
    }
    Ok(out)
}

/// Sums the value rows of each group: `ṽ_k = Σ_{BELONG_j = k} v_j`.
pub fn aggregate_values(v: &Matrix, g: &Grouping) -> Result<Matrix> {
    if v.rows() != g.n_windows() {
        return Err(Error::Shape {
            op: "aggregate_values",
            left: v.shape(),
            right: (g.n_windows(), v.cols()),
        });
    }
    let mut agg = Matrix::zeros(g.n_groups(), v.cols());
    for (j, &b) in g.belong().iter().enumerate() {
        for (a, x) in agg.row_mut(b).iter_mut().zip(v.row(j)) {
            *a += x;
        }
    }
    Ok(agg)
}

/// One head of grouped attention against explicit representatives.
/// Returns `(Õ, Ã)`; runs in `O(nNd)` time and `O(nN)` space.
pub fn group_attention_with(
    q: &Matrix,
    representatives: &Matrix,
    v: &Matrix,
    g: &Grouping,
    scale: f64,
) -> Result<(Matrix, Matrix)> {
    check_counts(g.counts())?;
    if representatives.rows() != g.n_groups() {
        return Err(Error::InvalidGrouping(format!(
            "{} representatives for {} groups",
            representatives.rows(),
            g.n_groups()
        )));
    }
    let v_agg = aggregate_values(v, g)?;
    let mut scores = q.matmul_nt(representatives)?;
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        row.iter_mut().for_each(|x| *x *= scale);
        group_softmax_row(row, g.counts());
    }
    let out = scores.matmul(&v_agg)?;
    Ok((out, scores))
}

/// One head of grouped attention using the grouping's centroids.
pub fn group_attention_head(q: &Matrix, v: &Matrix, g: &Grouping, scale: f64) -> Result<(Matrix, Matrix)> {
    group_attention_with(q, g.representatives(), v, g, scale)
}

/// Grouped self-attention with one grouping per head (built on that head's keys).
pub fn group_attention(h: &Matrix, layer: &AttentionLayer, groupings: &[Grouping]) -> Result<GroupAttentionOutput> {
    if groupings.len() != layer.heads {
        return Err(Error::InvalidGrouping(format!(
            "{} groupings for {} heads",
            groupings.len(),
            layer.heads
        )));
    }
    let (q, k, v) = layer.project(h)?;
    let mut outs = Vec::with_capacity(layer.heads);
    let mut scores = Vec::with_capacity(layer.heads);
    for ((qh, kh, vh), g) in layer.split_heads(&q, &k, &v)?.into_iter().zip(groupings) {
        g.validate(&kh)?;
        let (o, a) = group_attention_head(&qh, &vh, g, layer.scale())?;
        outs.push(o);
        scores.push(a);
    }
    let refs: Vec<&Matrix> = outs.iter().collect();
    Ok(GroupAttentionOutput {
        output: Matrix::concat_cols(&refs)?,
        scores,
        groupings: groupings.to_vec(),
    })
}

/// Outcome of comparing a restored attention matrix with the exact one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    /// `max(Ā/A, A/Ā)` over all entries.
    pub worst_ratio: f64,
    pub pass: bool,
}

/// Checks `1/ε ≤ Ā/A ≤ ε` entrywise.
pub fn check_error_bound(exact: &Matrix, restored: &Matrix, epsilon: f64) -> Result<BoundCheck> {
    if !(epsilon > 1.0) {
        return Err(Error::InvalidArgument(format!("error bound {epsilon} must exceed 1")));
    }
    if exact.shape() != restored.shape() {
        return Err(Error::Shape {
            op: "check_error_bound",
            left: exact.shape(),
            right: restored.shape(),
        });
    }
    let mut worst = 1.0f64;
    for r in 0..exact.rows() {
        for (c, (&a, &b)) in exact.row(r).iter().zip(restored.row(r)).enumerate() {
            if a <= 0.0 || b <= 0.0 {
                return Err(Error::DegenerateAttention { row: r, col: c });
            }
            worst = worst.max(b / a).max(a / b);
        }
    }
    Ok(BoundCheck {
        worst_ratio: worst,
        pass: worst <= epsilon,
    })
}

struct VanillaRule {
    weights: Matrix,
    scale: f64,
}

impl BackwardRule for VanillaRule {
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let a = &self.weights;
        let mut ds = grad.matmul_nt(v)?;
        let dv = a.matmul_tn(grad)?;
        for r in 0..ds.rows() {
            let ar = a.row(r);
            let inner: f64 = ds.row(r).iter().zip(ar).map(|(x, y)| x * y).sum();
            for (d, &w) in ds.row_mut(r).iter_mut().zip(ar) {
                *d = w * (*d - inner) * self.scale;
            }
        }
        Ok(vec![ds.matmul(k)?, ds.matmul_tn(q)?, dv])
    }
}

/// Records `softmax(Q·Kᵀ·scale)·V` as one node, keeping only the `n × n`
/// weights for the backward pass.
pub fn tape_attention(tape: &mut GradTape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let (out, weights) = attention_head(tape.value(q), tape.value(k), tape.value(v), scale)?;
    Ok(tape.custom(&[q, k, v], out, Box::new(VanillaRule { weights, scale })))
}

struct MeansRule {
    belong: Vec<usize>,
    counts: Vec<usize>,
}

impl BackwardRule for MeansRule {
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let keys = inputs[0];
        let mut gk = Matrix::zeros(keys.rows(), keys.cols());
        for (j, &b) in self.belong.iter().enumerate() {
            let inv = 1.0 / self.counts[b] as f64;
            for (o, g) in gk.row_mut(j).iter_mut().zip(grad.row(b)) {
                *o = g * inv;
            }
        }
        Ok(vec![gk])
    }
}

/// Group centroids of `keys` as a differentiable function of the keys; the
/// assignment itself is held constant.
pub fn tape_group_means(tape: &mut GradTape, keys: Var, g: &Grouping) -> Result<Var> {
    let kv = tape.value(keys);
    g.validate(kv)?;
    let mut means = aggregate_values(kv, g)?;
    for (k, &c) in g.counts().iter().enumerate() {
        let inv = 1.0 / c as f64;
        means.row_mut(k).iter_mut().for_each(|x| *x *= inv);
    }
    Ok(tape.custom(
        &[keys],
        means,
        Box::new(MeansRule {
            belong: g.belong().to_vec(),
            counts: g.counts().to_vec(),
        }),
    ))
}

struct GroupRule {
    scores: Matrix,
    v_agg: Matrix,
    belong: Vec<usize>,
    counts: Vec<usize>,
    scale: f64,
}

impl BackwardRule for GroupRule {
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let (q, reps, v) = (inputs[0], inputs[1], inputs[2]);
        let a = &self.scores;
        let mut dp = grad.matmul_nt(&self.v_agg)?;
        let dv_agg = a.matmul_tn(grad)?;
        for r in 0..dp.rows() {
            let ar = a.row(r);
            let inner: f64 = dp.row(r).iter().zip(ar).map(|(x, y)| x * y).sum();
            for ((d, &w), &c) in dp.row_mut(r).iter_mut().zip(ar).zip(&self.counts) {
                *d = w * (*d - c as f64 * inner) * self.scale;
            }
        }
        let mut dv = Matrix::zeros(v.rows(), v.cols());
        for (j, &b) in self.belong.iter().enumerate() {
            dv.row_mut(j).copy_from_slice(dv_agg.row(b));
        }
        Ok(vec![dp.matmul(reps)?, dp.matmul_tn(q)?, dv])
    }
}

/// Records grouped attention of `q` against representatives `reps` (usually
/// the output of [`tape_group_means`]) as one node.
pub fn tape_group_attention(
    tape: &mut GradTape,
    q: Var,
    reps: Var,
    v: Var,
    g: &Grouping,
    scale: f64,
) -> Result<Var> {
    let (out, scores) = group_attention_with(tape.value(q), tape.value(reps), tape.value(v), g, scale)?;
    let v_agg = aggregate_values(tape.value(v), g)?;
    Ok(tape.custom(
        &[q, reps, v],
        out,
        Box::new(GroupRule {
            scores,
            v_agg,
            belong: g.belong().to_vec(),
            counts: g.counts().to_vec(),
            scale,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::kmeans_group;
    use crate::tape::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn layer(d: usize, heads: usize, seed: u64) -> AttentionLayer {
        AttentionLayer::random(d, d, d, heads, &mut rng(seed)).unwrap()
    }

    #[test]
    fn single_window_attends_to_itself() {
        let l = layer(4, 1, 1);
        let h = Matrix::random_normal(1, 4, 1.0, &mut rng(2));
        let (o, a) = vanilla_attention(&h, &l).unwrap();
        assert_eq!(a[0].data(), &[1.0]);
        let v = h.matmul(&l.w_v).unwrap();
        assert!(o.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let l = layer(4, 2, 3);
        let row = Matrix::random_normal(1, 4, 1.0, &mut rng(4));
        let h = Matrix::concat_rows(&[&row, &row, &row, &row, &row]).unwrap();
        let (_, a) = vanilla_attention(&h, &l).unwrap();
        for head in &a {
            assert!(head.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn singleton_groups_reproduce_vanilla() {
        let l = layer(6, 2, 5);
        let h = Matrix::random_normal(7, 6, 1.0, &mut rng(6));
        let (o, _) = vanilla_attention(&h, &l).unwrap();
        let (_, k, _) = l.project(&h).unwrap();
        let groupings: Vec<Grouping> = (0..2)
            .map(|hd| Grouping::singletons(&k.slice_cols(hd * 3, hd * 3 + 3).unwrap()))
            .collect();
        let g = group_attention(&h, &l, &groupings).unwrap();
        assert!(g.output.max_abs_diff(&o).unwrap() < 1e-10);
    }

    #[test]
    fn single_group_is_mean_of_values() {
        let l = layer(4, 1, 7);
        let h = Matrix::random_normal(5, 4, 1.0, &mut rng(8));
        let (_, k, v) = l.project(&h).unwrap();
        let g = Grouping::from_assignment(&k, vec![0; 5], 1).unwrap();
        let out = group_attention(&h, &l, &[g]).unwrap();
        let mean = v.sum_rows().scale(1.0 / 5.0);
        for r in 0..5 {
            for c in 0..4 {
                assert!((out.output.get(r, c) - mean.get(0, c)).abs() < 1e-12);
            }
            assert!((out.scores[0].get(r, 0) - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn keys_equal_to_representatives_match_vanilla() {
        // n = 6, N = 2: build keys that are exactly the group centroids
        let mut r = rng(9);
        let q = Matrix::random_normal(6, 3, 1.0, &mut r);
        let v = Matrix::random_normal(6, 3, 1.0, &mut r);
        let reps = Matrix::random_normal(2, 3, 1.0, &mut r);
        let belong = vec![0, 1, 1, 0, 1, 0];
        let k = Matrix::from_rows(&belong.iter().map(|&b| reps.row(b).to_vec()).collect::<Vec<_>>()).unwrap();
        let g = Grouping::from_assignment(&k, belong, 2).unwrap();
        let scale = 1.0 / 3f64.sqrt();
        let (o, _) = attention_head(&q, &k, &v, scale).unwrap();
        let (og, _) = group_attention_head(&q, &v, &g, scale).unwrap();
        assert!(o.max_abs_diff(&og).unwrap() < 1e-10);
    }

    #[test]
    fn group_softmax_examples() {
        let p = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let a = group_softmax(&p, &[3, 1]).unwrap();
        assert!((a.get(0, 0) - 0.25).abs() < 1e-15 && (a.get(0, 1) - 0.25).abs() < 1e-15);

        let p = Matrix::random_normal(3, 4, 2.0, &mut rng(10));
        assert!(group_softmax(&p, &[1, 1, 1, 1]).unwrap().max_abs_diff(&p.softmax_rows()).unwrap() < 1e-15);
        assert!(matches!(group_softmax(&p, &[1, 0, 2, 1]), Err(Error::InvalidGrouping(_))));
    }

    #[test]
    fn restore_duplicates_columns() {
        let k = Matrix::zeros(4, 1);
        let g = Grouping::from_assignment(&k, vec![0, 0, 1, 1], 2).unwrap();
        let a = Matrix::from_rows(&[[0.1, 0.4], [0.3, 0.2]]).unwrap();
        let full = restore_full(&a, &g).unwrap();
        assert_eq!(full.row(0), &[0.1, 0.1, 0.4, 0.4]);
        assert_eq!(full.row(1), &[0.3, 0.3, 0.2, 0.2]);

        let s = Grouping::singletons(&Matrix::zeros(2, 1));
        let a = Matrix::from_rows(&[[0.5, 0.5], [0.2, 0.8]]).unwrap();
        assert_eq!(restore_full(&a, &s).unwrap(), a);
    }

    #[test]
    fn bound_check_basics() {
        let a = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let r = check_error_bound(&a, &a, 1.5).unwrap();
        assert_eq!(r, BoundCheck { worst_ratio: 1.0, pass: true });
        let b = Matrix::from_rows(&[[0.9, 0.1]]).unwrap();
        let r = check_error_bound(&a, &b, 2.0).unwrap();
        assert!((r.worst_ratio - 5.0).abs() < 1e-12 && !r.pass);
        let z = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(check_error_bound(&a, &z, 2.0), Err(Error::DegenerateAttention { row: 0, col: 1 })));
        assert!(check_error_bound(&a, &a, 1.0).is_err());
    }

    #[test]
    fn grouping_head_mismatch() {
        let l = layer(4, 2, 11);
        let h = Matrix::random_normal(3, 4, 1.0, &mut rng(12));
        let g = Grouping::singletons(&Matrix::zeros(3, 2));
        assert!(group_attention(&h, &l, &[g]).is_err());
    }

    #[test]
    fn fused_vanilla_gradients() {
        let mut r = rng(13);
        let (q0, k0, v0) = (
            Matrix::random_normal(5, 3, 1.0, &mut r),
            Matrix::random_normal(5, 3, 1.0, &mut r),
            Matrix::random_normal(5, 2, 1.0, &mut r),
        );
        let w = Matrix::random_normal(5, 2, 1.0, &mut r);
        let loss = |t: &mut GradTape, q: Var, k: Var, v: Var| -> Result<Var> {
            let o = tape_attention(t, q, k, v, 0.7)?;
            let wv = t.leaf(w.clone());
            let p = t.mul(o, wv)?;
            let p = t.mul(p, o)?;
            Ok(t.sum_all(p))
        };
        let eq = grad_check(|t, x| {
            let (k, v) = (t.leaf(k0.clone()), t.leaf(v0.clone()));
            loss(t, x, k, v)
        }, &q0, 1e-5).unwrap();
        let ek = grad_check(|t, x| {
            let (q, v) = (t.leaf(q0.clone()), t.leaf(v0.clone()));
            loss(t, q, x, v)
        }, &k0, 1e-5).unwrap();
        let ev = grad_check(|t, x| {
            let (q, k) = (t.leaf(q0.clone()), t.leaf(k0.clone()));
            loss(t, q, k, x)
        }, &v0, 1e-5).unwrap();
        assert!(eq < 1e-5 && ek < 1e-5 && ev < 1e-5, "{eq} {ek} {ev}");
    }

    #[test]
    fn fused_vanilla_matches_primitive_composition() {
        let mut r = rng(14);
        let q0 = Matrix::random_normal(6, 4, 1.0, &mut r);
        let k0 = Matrix::random_normal(6, 4, 1.0, &mut r);
        let v0 = Matrix::random_normal(6, 3, 1.0, &mut r);
        let mut t = GradTape::new();
        let (q, k, v) = (t.leaf(q0.clone()), t.leaf(k0.clone()), t.leaf(v0.clone()));
        let fused = tape_attention(&mut t, q, k, v, 0.5).unwrap();
        let s = t.matmul_nt(q, k).unwrap();
        let s = t.scale(s, 0.5);
        let a = t.softmax_rows(s);
        let composed = t.matmul(a, v).unwrap();
        assert!(t.value(fused).max_abs_diff(t.value(composed)).unwrap() < 1e-14);

        let sq = t.mul(fused, fused).unwrap();
        let l1 = t.sum_all(sq);
        let g1 = t.backward(l1).unwrap();
        let mut t2 = GradTape::new();
        let (q2, k2, v2) = (t2.leaf(q0), t2.leaf(k0), t2.leaf(v0));
        let s = t2.matmul_nt(q2, k2).unwrap();
        let s = t2.scale(s, 0.5);
        let a = t2.softmax_rows(s);
        let c = t2.matmul(a, v2).unwrap();
        let sq = t2.mul(c, c).unwrap();
        let l2 = t2.sum_all(sq);
        let g2 = t2.backward(l2).unwrap();
        for (a, b) in [(q, q2), (k, k2), (v, v2)] {
            assert!(g1.wrt(a).max_abs_diff(&g2.wrt(b)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn fused_group_gradients_through_keys_and_values() {
        let mut r = rng(15);
        let q0 = Matrix::random_normal(8, 3, 1.0, &mut r);
        let k0 = Matrix::random_normal(8, 3, 1.0, &mut r);
        let v0 = Matrix::random_normal(8, 2, 1.0, &mut r);
        let w = Matrix::random_normal(8, 2, 1.0, &mut r);
        let g = kmeans_group(&k0, 3, 2, 1).unwrap();
        let loss = |t: &mut GradTape, q: Var, k: Var, v: Var| -> Result<Var> {
            let reps = tape_group_means(t, k, &g)?;
            let o = tape_group_attention(t, q, reps, v, &g, 0.6)?;
            let wv = t.leaf(w.clone());
            let p = t.mul(o, wv)?;
            let p = t.mul(p, o)?;
            Ok(t.sum_all(p))
        };
        let eq = grad_check(|t, x| {
            let (k, v) = (t.leaf(k0.clone()), t.leaf(v0.clone()));
            loss(t, x, k, v)
        }, &q0, 1e-5).unwrap();
        let ek = grad_check(|t, x| {
            let (q, v) = (t.leaf(q0.clone()), t.leaf(v0.clone()));
            loss(t, q, x, v)
        }, &k0, 1e-5).unwrap();
        let ev = grad_check(|t, x| {
            let (q, k) = (t.leaf(q0.clone()), t.leaf(k0.clone()));
            loss(t, q, k, x)
        }, &v0, 1e-5).unwrap();
        assert!(eq < 1e-5 && ek < 1e-5 && ev < 1e-5, "{eq} {ek} {ev}");
    }
}
