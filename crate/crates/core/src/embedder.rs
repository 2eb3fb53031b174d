//! Time-aware convolution: raw series in, one embedding per window out.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{BackwardRule, GradTape, Var};

/// Value written into every masked position.
pub const SENTINEL: f64 = -1.0;

/// A `t × m` series with a per-cell missing flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeseries {
    values: Matrix,
    mask: Vec<bool>,
}

impl Timeseries {
    /// Fully observed series.
    pub fn new(values: Matrix) -> Self {
        let mask = vec![false; values.rows() * values.cols()];
        Self { values, mask }
    }

    /// Series with an explicit row-major mask.
    pub fn with_mask(values: Matrix, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != values.rows() * values.cols() {
            return Err(Error::Shape {
                op: "timeseries_mask",
                left: values.shape(),
                right: (mask.len(), 1),
            });
        }
        Ok(Self { values, mask })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_masked(&self, t: usize, c: usize) -> bool {
        self.mask[t * self.channels() + c]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Timestamps with at least one masked channel.
    pub fn masked_timestamps(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&t| (0..self.channels()).any(|c| self.is_masked(t, c)))
            .collect()
    }
}

/// Per-channel min-max scaler onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    /// Fits on the observed cells of `data`.
    pub fn fit(data: &[Timeseries]) -> Result<Self> {
        let m = data
            .first()
            .map(|t| t.channels())
            .ok_or_else(|| Error::InvalidArgument("cannot fit a scaler on no series".into()))?;
        let mut min = vec![f64::INFINITY; m];
        let mut max = vec![f64::NEG_INFINITY; m];
        for ts in data {
            if ts.channels() != m {
                return Err(Error::Shape {
                    op: "scaler_fit",
                    left: (ts.len(), ts.channels()),
                    right: (0, m),
                });
            }
            for t in 0..ts.len() {
                for c in 0..m {
                    if !ts.is_masked(t, c) {
                        let x = ts.values.get(t, c);
                        min[c] = min[c].min(x);
                        max[c] = max[c].max(x);
                    }
                }
            }
        }
        for c in 0..m {
            if !min[c].is_finite() {
                min[c] = 0.0;
                max[c] = 1.0;
            }
        }
        Ok(Self { min, max })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            min: vec![0.0; m],
            max: vec![1.0; m],
        }
    }

    fn range(&self, c: usize) -> f64 {
        let r = self.max[c] - self.min[c];
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    /// Scales observed cells, clamping below at zero, and writes the
    /// sentinel into masked cells.
    pub fn transform(&self, ts: &Timeseries) -> Result<Timeseries> {
        self.check(ts)?;
        let mut out = ts.clone();
        for t in 0..ts.len() {
            for c in 0..ts.channels() {
                let v = if ts.is_masked(t, c) {
                    SENTINEL
                } else {
                    ((ts.values.get(t, c) - self.min[c]) / self.range(c)).max(0.0)
                };
                out.values.set(t, c, v);
            }
        }
        Ok(out)
    }

    /// Maps scaled values back to the original units.
    pub fn inverse(&self, values: &Matrix) -> Result<Matrix> {
        if values.cols() != self.min.len() {
            return Err(Error::Shape {
                op: "scaler_inverse",
                left: values.shape(),
                right: (0, self.min.len()),
            });
        }
        let mut out = values.clone();
        for t in 0..values.rows() {
            for c in 0..values.cols() {
                out.set(t, c, values.get(t, c) * self.range(c) + self.min[c]);
            }
        }
        Ok(out)
    }

    fn check(&self, ts: &Timeseries) -> Result<()> {
        if ts.channels() != self.min.len() {
            return Err(Error::Shape {
                op: "scaler",
                left: (ts.len(), ts.channels()),
                right: (0, self.min.len()),
            });
        }
        Ok(())
    }
}

/// Masks each timestamp independently with probability `p`; a masked
/// timestamp gets the sentinel in every channel. Cells already masked stay
/// masked.
pub fn mask_timestamps(ts: &Timeseries, p: f64, seed: u64) -> Result<Timeseries> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("mask rate {p} outside [0, 1)")));
    }
    check_nonnegative(ts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ts.clone();
    let m = ts.channels();
    for t in 0..ts.len() {
        if rng.random::<f64>() < p {
            for c in 0..m {
                out.values.set(t, c, SENTINEL);
                out.mask[t * m + c] = true;
            }
        }
    }
    Ok(out)
}

/// Masks the final `h` timestamps.
pub fn mask_tail(ts: &Timeseries, h: usize) -> Result<Timeseries> {
    if h >= ts.len() {
        return Err(Error::InvalidArgument(format!(
            "horizon {h} must be shorter than the series length {}",
            ts.len()
        )));
    }
    check_nonnegative(ts)?;
    let mut out = ts.clone();
    let m = ts.channels();
    for t in ts.len() - h..ts.len() {
        for c in 0..m {
            out.values.set(t, c, SENTINEL);
            out.mask[t * m + c] = true;
        }
    }
    Ok(out)
}

fn check_nonnegative(ts: &Timeseries) -> Result<()> {
    for t in 0..ts.len() {
        for c in 0..ts.channels() {
            if !ts.is_masked(t, c) && ts.values.get(t, c) < 0.0 {
                return Err(Error::Contract(format!(
                    "negative value {} at ({t}, {c}); scale before masking",
                    ts.values.get(t, c)
                )));
            }
        }
    }
    Ok(())
}

/// Reads a CSV with one row per timestamp. A header row is detected when
/// any of its cells fails to parse as a number. Empty cells are masked.
pub fn read_csv(path: &Path) -> Result<Timeseries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut mask = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if idx == 0 && record.iter().any(|c| !c.is_empty() && c.parse::<f64>().is_err()) {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            if cell.is_empty() {
                row.push(0.0);
                mask.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Parse(format!("{}: row {}, column {}: not a number: {cell:?}", path.display(), idx + 1, col + 1))
                })?;
                row.push(v);
                mask.push(false);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    Timeseries::with_mask(Matrix::from_rows(&rows)?, mask)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Writes values as CSV with a `c0,c1,..` header. Masked cells are left
/// empty when a mask is given.
pub fn write_csv(path: &Path, values: &Matrix, mask: Option<&[bool]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = (0..values.cols()).map(|c| format!("c{c}")).collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in 0..values.rows() {
        let row: Vec<String> = (0..values.cols())
            .map(|c| match mask {
                Some(m) if m[t * values.cols() + c] => String::new(),
                _ => values.get(t, c).to_string(),
            })
            .collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Convolution weights, position table, CLS slot and decoder.
///
/// The kernel is stored as a `(w·m) × d` matrix whose row `l·m + c` holds
/// the weight of offset `l`, channel `c`, so one window is a contiguous
/// slice of the row-major series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvEmbedder {
    pub window: usize,
    pub stride: usize,
    pub channels: usize,
    pub kernel: Matrix,
    pub bias: Matrix,
    pub positions: Matrix,
    pub cls: Matrix,
    pub decoder: Matrix,
    pub decoder_bias: Matrix,
}

impl ConvEmbedder {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        channels: usize,
        window: usize,
        stride: usize,
        n_max: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || channels == 0 || window == 0 || stride == 0 || n_max == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedder sizes must be positive (d={d}, m={channels}, w={window}, stride={stride}, n_max={n_max})"
            )));
        }
        let fan = window * channels;
        let std = (1.0 / fan as f64).sqrt();
        Ok(Self {
            window,
            stride,
            channels,
            kernel: Matrix::random_normal(fan, d, std, rng),
            bias: Matrix::zeros(1, d),
            positions: Matrix::random_normal(n_max, d, 0.02, rng),
            cls: Matrix::random_normal(1, d, 0.02, rng),
            decoder: Matrix::random_normal(d, fan, (1.0 / d as f64).sqrt(), rng),
            decoder_bias: Matrix::zeros(1, channels),
        })
    }

    pub fn d_model(&self) -> usize {
        self.kernel.cols()
    }

    pub fn n_max(&self) -> usize {
        self.positions.rows()
    }

    /// `⌊(t − w)/stride⌋ + 1`.
    pub fn n_windows(&self, t: usize) -> Result<usize> {
        if t < self.window {
            return Err(Error::InputTooShort { len: t, window: self.window });
        }
        Ok((t - self.window) / self.stride + 1)
    }

    fn check_series(&self, values: &Matrix) -> Result<usize> {
        if values.cols() != self.channels {
            return Err(Error::Shape {
                op: "embed",
                left: values.shape(),
                right: (self.window, self.channels),
            });
        }
        let n = self.n_windows(values.rows())?;
        if n > self.n_max() {
            return Err(Error::Range(format!(
                "{n} windows exceed the position table size {}",
                self.n_max()
            )));
        }
        Ok(n)
    }

    /// `n × (w·m)` matrix whose row `i` is the window starting at `i·stride`.
    pub fn unfold(&self, values: &Matrix) -> Result<Matrix> {
        let n = self.check_series(values)?;
        let span = self.window * self.channels;
        let mut out = Matrix::zeros(n, span);
        for i in 0..n {
            let start = i * self.stride * self.channels;
            out.row_mut(i).copy_from_slice(&values.data()[start..start + span]);
        }
        Ok(out)
    }

    /// Window embeddings plus positions, optionally with CLS in row 0.
    pub fn embed(&self, ts: &Timeseries, with_cls: bool) -> Result<Matrix> {
        let windows = self.unfold(ts.values())?;
        let n = windows.rows();
        let x = windows
            .matmul(&self.kernel)?
            .add_row_broadcast(&self.bias)?
            .add(&self.positions.slice_rows(0, n)?)?;
        if with_cls {
            Matrix::concat_rows(&[&self.cls, &x])
        } else {
            Ok(x)
        }
    }

    /// Transpose-convolution decode of `n` window embeddings into `t × m`.
    pub fn decode(&self, z: &Matrix, t: usize) -> Result<Matrix> {
        let n = self.n_windows(t)?;
        if z.rows() != n || z.cols() != self.d_model() {
            return Err(Error::Shape {
                op: "decode",
                left: z.shape(),
                right: (n, self.d_model()),
            });
        }
        let patches = z.matmul(&self.decoder)?;
        fold(&patches, t, self.window, self.stride, self.channels)?.add_row_broadcast(&self.decoder_bias)
    }

    /// Places every parameter on `tape`.
    pub fn leaves(&self, tape: &mut GradTape) -> EmbedderVars {
        EmbedderVars {
            kernel: tape.leaf(self.kernel.clone()),
            bias: tape.leaf(self.bias.clone()),
            positions: tape.leaf(self.positions.clone()),
            cls: tape.leaf(self.cls.clone()),
            decoder: tape.leaf(self.decoder.clone()),
            decoder_bias: tape.leaf(self.decoder_bias.clone()),
        }
    }

    /// Recorded counterpart of [`ConvEmbedder::embed`].
    pub fn tape_embed(&self, tape: &mut GradTape, vars: &EmbedderVars, ts: &Timeseries, with_cls: bool) -> Result<Var> {
        let windows = self.unfold(ts.values())?;
        let n = windows.rows();
        let w = tape.leaf(windows);
        let x = tape.matmul(w, vars.kernel)?;
        let x = tape.add_row(x, vars.bias)?;
        let pos = tape.slice_rows(vars.positions, 0, n)?;
        let x = tape.add(x, pos)?;
        if with_cls {
            tape.concat_rows(&[vars.cls, x])
        } else {
            Ok(x)
        }
    }

    /// Recorded counterpart of [`ConvEmbedder::decode`].
    pub fn tape_decode(&self, tape: &mut GradTape, vars: &EmbedderVars, z: Var, t: usize) -> Result<Var> {
        let n = self.n_windows(t)?;
        if tape.value(z).rows() != n {
            return Err(Error::Shape {
                op: "decode",
                left: tape.value(z).shape(),
                right: (n, self.d_model()),
            });
        }
        let patches = tape.matmul(z, vars.decoder)?;
        let folded = fold(tape.value(patches), t, self.window, self.stride, self.channels)?;
        let y = tape.custom(
            &[patches],
            folded,
            Box::new(FoldRule {
                window: self.window,
                stride: self.stride,
                channels: self.channels,
            }),
        );
        tape.add_row(y, vars.decoder_bias)
    }
}

/// Tape handles for every [`ConvEmbedder`] parameter.
#[derive(Clone, Copy, Debug)]
pub struct EmbedderVars {
    pub kernel: Var,
    pub bias: Var,
    pub positions: Var,
    pub cls: Var,
    pub decoder: Var,
    pub decoder_bias: Var,
}

/// Overlap-add of `n × (w·m)` patches into a `t × m` series.
pub fn fold(patches: &Matrix, t: usize, window: usize, stride: usize, channels: usize) -> Result<Matrix> {
    if patches.cols() != window * channels || (patches.rows() > 0 && (patches.rows() - 1) * stride + window > t) {
        return Err(Error::Shape {
            op: "fold",
            left: patches.shape(),
            right: (t, channels),
        });
    }
    let mut out = Matrix::zeros(t, channels);
    let span = window * channels;
    for i in 0..patches.rows() {
        let start = i * stride * channels;
        for (o, p) in out.data_mut()[start..start + span].iter_mut().zip(patches.row(i)) {
            *o += p;
        }
    }
    Ok(out)
}

struct FoldRule {
    window: usize,
    stride: usize,
    channels: usize,
}

impl BackwardRule for FoldRule {
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let n = inputs[0].rows();
        let span = self.window * self.channels;
        let mut g = Matrix::zeros(n, span);
        for i in 0..n {
            let start = i * self.stride * self.channels;
            g.row_mut(i).copy_from_slice(&grad.data()[start..start + span]);
        }
        Ok(vec![g])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_positions(e: &mut ConvEmbedder) {
        let (r, c) = e.positions.shape();
        e.positions = Matrix::zeros(r, c);
    }

    #[test]
    fn sum_kernel_example() {
        let mut e = ConvEmbedder::new(1, 1, 2, 1, 8, &mut rng(0)).unwrap();
        e.kernel = Matrix::filled(2, 1, 1.0);
        zero_positions(&mut e);
        let ts = Timeseries::new(Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(e.embed(&ts, false).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn zero_kernel_gives_bias_plus_position() {
        let mut e = ConvEmbedder::new(3, 2, 2, 2, 8, &mut rng(1)).unwrap();
        e.kernel = Matrix::zeros(4, 3);
        e.bias = Matrix::row_vector(&[0.5, -1.0, 2.0]);
        let ts = Timeseries::new(Matrix::random_uniform(8, 2, 0.0, 1.0, &mut rng(2)));
        let z = e.embed(&ts, false).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert_eq!(z.get(i, c), e.bias.get(0, c) + e.positions.get(i, c));
            }
        }
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let (d, m, w, stride, t) = (4, 3, 5, 2, 19);
        let e = ConvEmbedder::new(d, m, w, stride, 16, &mut rng(3)).unwrap();
        let x = Matrix::random_normal(t, m, 1.0, &mut rng(4));
        let z = e.embed(&Timeseries::new(x.clone()), true).unwrap();
        let n = (t - w) / stride + 1;
        assert_eq!(z.shape(), (n + 1, d));
        assert_eq!(z.row(0), e.cls.row(0));
        for i in 0..n {
            for k in 0..d {
                let mut s = e.bias.get(0, k);
                for l in 0..w {
                    for c in 0..m {
                        s += x.get(i * stride + l, c) * e.kernel.get(l * m + c, k);
                    }
                }
                s += e.positions.get(i, k);
                assert!((z.get(i + 1, k) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_short_and_too_long() {
        let e = ConvEmbedder::new(2, 1, 4, 4, 2, &mut rng(5)).unwrap();
        let short = Timeseries::new(Matrix::zeros(3, 1));
        assert!(matches!(e.embed(&short, false), Err(Error::InputTooShort { len: 3, window: 4 })));
        let long = Timeseries::new(Matrix::zeros(12, 1));
        assert!(matches!(e.embed(&long, false), Err(Error::Range(_))));
    }

    #[test]
    fn decode_single_window_is_linear_map() {
        let (d, m, w) = (3, 2, 4);
        let mut e = ConvEmbedder::new(d, m, w, w, 4, &mut rng(6)).unwrap();
        e.decoder_bias = Matrix::row_vector(&[0.25, -0.5]);
        let z = Matrix::random_normal(1, d, 1.0, &mut rng(7));
        let y = e.decode(&z, w).unwrap();
        for l in 0..w {
            for c in 0..m {
                let mut s = e.decoder_bias.get(0, c);
                for k in 0..d {
                    s += z.get(0, k) * e.decoder.get(k, l * m + c);
                }
                assert!((y.get(l, c) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_zero_embedding_is_bias() {
        let mut e = ConvEmbedder::new(3, 2, 2, 1, 8, &mut rng(8)).unwrap();
        e.decoder_bias = Matrix::row_vector(&[1.5, 2.5]);
        let y = e.decode(&Matrix::zeros(5, 3), 6).unwrap();
        for t in 0..6 {
            assert_eq!(y.row(t), &[1.5, 2.5]);
        }
        assert!(matches!(e.decode(&Matrix::zeros(4, 3), 6), Err(Error::Shape { .. })));
    }

    #[test]
    fn decode_keeps_shape_with_uncovered_tail() {
        let e = ConvEmbedder::new(2, 3, 4, 4, 8, &mut rng(9)).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(e.decode(&z, 11).unwrap().shape(), (11, 3));
    }

    #[test]
    fn fold_gradient() {
        let patches = Matrix::random_normal(3, 4, 1.0, &mut rng(10));
        let err = grad_check(
            |tape, x| {
                let v = fold(tape.value(x), 7, 2, 2, 2)?;
                let y = tape.custom(&[x], v, Box::new(FoldRule { window: 2, stride: 2, channels: 2 }));
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &patches,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn overlapping_fold_adds() {
        let patches = Matrix::filled(3, 2, 1.0);
        let y = fold(&patches, 4, 2, 1, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn mask_rate_zero_is_identity() {
        let ts = Timeseries::new(Matrix::random_uniform(50, 2, 0.0, 1.0, &mut rng(11)));
        let out = mask_timestamps(&ts, 0.0, 1).unwrap();
        assert_eq!(out, ts);
        assert_eq!(out.masked_count(), 0);
    }

    #[test]
    fn mask_rate_fraction() {
        let ts = Timeseries::new(Matrix::filled(10_000, 1, 0.5));
        let out = mask_timestamps(&ts, 0.2, 42).unwrap();
        let frac = out.masked_timestamps().len() as f64 / 10_000.0;
        assert!((0.18..=0.22).contains(&frac), "{frac}");
    }

    #[test]
    fn mask_is_reproducible_and_whole_timestamp() {
        let ts = Timeseries::new(Matrix::filled(4, 3, 0.5));
        let a = mask_timestamps(&ts, 0.5, 7).unwrap();
        let b = mask_timestamps(&ts, 0.5, 7).unwrap();
        assert_eq!(a, b);
        for t in 0..4 {
            let row: Vec<bool> = (0..3).map(|c| a.is_masked(t, c)).collect();
            assert!(row.iter().all(|&x| x == row[0]));
            if row[0] {
                assert!(a.values().row(t).iter().all(|&v| v == SENTINEL));
            } else {
                assert_eq!(a.values().row(t), ts.values().row(t));
            }
        }
    }

    #[test]
    fn masking_rejects_negative_values() {
        let ts = Timeseries::new(Matrix::from_vec(2, 1, vec![0.5, -0.1]).unwrap());
        assert!(matches!(mask_timestamps(&ts, 0.2, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn tail_mask() {
        let ts = Timeseries::new(Matrix::filled(5, 2, 0.3));
        let out = mask_tail(&ts, 2).unwrap();
        assert_eq!(out.masked_timestamps(), vec![3, 4]);
        assert!(mask_tail(&ts, 5).is_err());
        assert_eq!(mask_tail(&ts, 0).unwrap(), ts);
    }

    #[test]
    fn scaler_maps_to_unit_range_and_back() {
        let raw = Matrix::from_rows(&[[2.0, -1.0], [4.0, 1.0], [3.0, 0.0]]).unwrap();
        let ts = Timeseries::new(raw.clone());
        let s = Scaler::fit(std::slice::from_ref(&ts)).unwrap();
        let scaled = s.transform(&ts).unwrap();
        assert_eq!(scaled.values().data(), &[0.0, 0.0, 1.0, 1.0, 0.5, 0.5]);
        assert!(s.inverse(scaled.values()).unwrap().max_abs_diff(&raw).unwrap() < 1e-15);
    }

    #[test]
    fn csv_round_trip_with_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "a,b\n1.5,2\n,3\n4,\n").unwrap();
        let ts = read_csv(&path).unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts.mask(), &[false, false, true, false, false, true]);
        let out = dir.path().join("o.csv");
        write_csv(&out, ts.values(), Some(ts.mask())).unwrap();
        assert_eq!(read_csv(&out).unwrap(), ts);
        let headerless = dir.path().join("h.csv");
        std::fs::write(&headerless, "1,2\n3,4\n").unwrap();
        assert_eq!(read_csv(&headerless).unwrap().len(), 2);
    }

    #[test]
    fn missing_csv_names_path() {
        let err = read_csv(Path::new("/nonexistent/series.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/series.csv"), "{err}");
    }

    #[test]
    fn tape_embed_and_decode_match_plain() {
        let e = ConvEmbedder::new(4, 2, 3, 2, 8, &mut rng(12)).unwrap();
        let ts = Timeseries::new(Matrix::random_uniform(9, 2, 0.0, 1.0, &mut rng(13)));
        let mut tape = GradTape::new();
        let vars = e.leaves(&mut tape);
        let z = e.tape_embed(&mut tape, &vars, &ts, true).unwrap();
        assert_eq!(tape.value(z), &e.embed(&ts, true).unwrap());
        let body = tape.slice_rows(z, 1, 5).unwrap();
        let y = e.tape_decode(&mut tape, &vars, body, 9).unwrap();
        let plain = e.decode(&e.embed(&ts, false).unwrap(), 9).unwrap();
        assert_eq!(tape.value(y), &plain);
    }

    proptest! {
        #[test]
        fn embed_is_linear(seed in 0u64..200, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut r = rng(seed);
            let e = ConvEmbedder::new(3, 2, 3, 1, 16, &mut r).unwrap();
            let x = Matrix::random_normal(10, 2, 1.0, &mut r);
            let y = Matrix::random_normal(10, 2, 1.0, &mut r);
            let offset = |m: &Matrix| -> Matrix {
                let raw = e.embed(&Timeseries::new(m.clone()), false).unwrap();
                let n = raw.rows();
                raw.sub(&e.positions.slice_rows(0, n).unwrap()).unwrap()
                    .add_row_broadcast(&e.bias.scale(-1.0)).unwrap()
            };
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = offset(&combo);
            let rhs = offset(&x).scale(a).add(&offset(&y).scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
        }

        #[test]
        fn masking_preserves_unmasked(seed in 0u64..200, p in 0.0f64..0.9) {
            let ts = Timeseries::new(Matrix::random_uniform(30, 3, 0.0, 1.0, &mut rng(seed)));
            let out = mask_timestamps(&ts, p, seed).unwrap();
            for t in 0..30 {
                for c in 0..3 {
                    if !out.is_masked(t, c) {
                        prop_assert_eq!(out.values().get(t, c), ts.values().get(t, c));
                    } else {
                        prop_assert_eq!(out.values().get(t, c), SENTINEL);
                    }
                }
            }
        }
    }
}
