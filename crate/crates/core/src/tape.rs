//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`GradTape`] records every operation as a node appended after its
//! inputs, so node order is a topological order and the backward pass
//! simply walks the nodes from the loss down to index zero. Layers that need
//! a fused kernel (attention, grouping) plug in through [`BackwardRule`].
//!
//! ```
//! use grpattn::{GradTape, Matrix};
//!
//! let mut tape = GradTape::new();
//! let x = tape.leaf(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint rule for a fused operation recorded with [`GradTape::custom`].
pub trait BackwardRule {
    /// Returns one gradient per input, in input order, each shaped like its input.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Mean(Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records operations for one forward pass. Confined to a single thread.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zero when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds a `1 × cols` row (a bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row_broadcast(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Column sums, `1 × cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.push(v, Op::SumRows(a))
    }

    /// Row sums, `rows × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_cols();
        self.push(v, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(v, Op::Ln(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Per-row normalization to zero mean and unit variance, then `γ ∘ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gamma, beta] {
            if self.value(p).shape() != (1, cols) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: xv.shape(),
                    right: self.value(p).shape(),
                });
            }
        }
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        let out = normalized
            .hadamard(&broadcast_row(self.value(gamma), rows))?
            .add_row_broadcast(self.value(beta))?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Records a fused operation whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, rule: Box<dyn BackwardRule>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(loss).shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(val(*b))?)?;
                accumulate(grads, *b, g.hadamard(val(*a))?)?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *row, g.sum_rows())?;
            }
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_nt(val(*b))?)?;
                accumulate(grads, *b, val(*a).matmul_tn(g)?)?;
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, g.matmul(val(*b))?)?;
                accumulate(grads, *b, g.matmul_tn(val(*a))?)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose())?,
            Op::SumRows(a) => {
                let rows = val(*a).rows();
                accumulate(grads, *a, broadcast_row(g, rows))?;
            }
            Op::SumCols(a) => {
                let (rows, cols) = val(*a).shape();
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    out.row_mut(r).fill(g.get(r, 0));
                }
                accumulate(grads, *a, out)?;
            }
            Op::SumAll(a) => {
                let (rows, cols) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(rows, cols, g.get(0, 0)))?;
            }
            Op::Mean(a) => {
                let (rows, cols) = val(*a).shape();
                let n = (rows * cols).max(1) as f64;
                accumulate(grads, *a, Matrix::filled(rows, cols, g.get(0, 0) / n))?;
            }
            Op::Exp(a) => accumulate(grads, *a, g.hadamard(&node.value)?)?,
            Op::Ln(a) => {
                let ga = g.hadamard(&val(*a).map(|v| 1.0 / v))?;
                accumulate(grads, *a, ga)?;
            }
            Op::Gelu(a) => {
                let ga = g.hadamard(&val(*a).map(gelu_grad))?;
                accumulate(grads, *a, ga)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    accumulate(grads, p, g.slice_rows(start, start + rows)?)?;
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut out = Matrix::zeros(rows, cols);
                out.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                accumulate(grads, *a, out)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    accumulate(grads, p, g.slice_cols(start, start + cols)?)?;
                    start += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    out.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, out)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gam = val(*gamma);
                let (rows, cols) = normalized.shape();
                accumulate(grads, *beta, g.sum_rows())?;
                accumulate(grads, *gamma, g.hadamard(normalized)?.sum_rows())?;
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let xh = normalized.row(r);
                    let dxh: Vec<f64> = g.row(r).iter().zip(gam.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxh.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, d), h) in gx.row_mut(r).iter_mut().zip(&dxh).zip(xh) {
                        *o = inv_std[r] * (d - mean_d - h * mean_dx);
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::Custom { inputs, rule } => {
                let mats: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                let gs = rule.backward(&mats, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "backward rule returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    accumulate(grads, v, gv)?;
                }
            }
        }
        Ok(())
    }
}

fn broadcast_row(row: &Matrix, rows: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, row.cols());
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(row.row(0));
    }
    out
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Compares the reverse-mode gradient of `f` at `x` against central finite
/// differences with step `h`, returning the largest relative deviation.
///
/// The relative error per coordinate is `|ad − fd| / max(|ad|, |fd|, 1e-3)`;
/// the floor keeps coordinates whose true gradient is zero from dividing by
/// rounding noise.
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    let eval = |m: &Matrix| -> Result<f64> {
        let mut tape = GradTape::new();
        let v = tape.leaf(m.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "grad_check",
                left: value.shape(),
                right: (1, 1),
            });
        }
        Ok(value.get(0, 0))
    };

    let mut tape = GradTape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let fx = tape.value(out).get(0, 0);
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {fx}")));
    }
    let analytic = tape.backward(out)?.wrt(v);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f(x ± h·e_{i})")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
