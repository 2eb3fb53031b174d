//! Encoder stack: convolution embedder, attention blocks, optional
//! classification head, and per-layer group schedulers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{tape_attention, tape_group_attention, tape_group_means, AttentionLayer};
use crate::embedder::{ConvEmbedder, EmbedderVars, Scaler, Timeseries};
use crate::error::{Error, Result};
use crate::grouping::{kmeans_group, Grouping, DEFAULT_KMEANS_ITERS};
use crate::matrix::Matrix;
use crate::scheduler::{SchedulerState, DEFAULT_ALPHA, DEFAULT_EPSILON};
use crate::tape::{GradTape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Vanilla,
    Group,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "group" => Ok(Self::Group),
            other => Err(Error::config("mode", format!("expected vanilla or group, got {other:?}"))),
        }
    }
}

/// Architecture and grouping settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub stride: usize,
    pub n_max: usize,
    pub mode: AttentionMode,
    pub kmeans_iters: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size defaults: 8 layers, 2 heads, `d = 64`, kernel 5, `ε = 2`.
    pub fn standard(channels: usize) -> Self {
        Self {
            channels,
            d_model: 64,
            layers: 8,
            heads: 2,
            window: 5,
            stride: 5,
            n_max: 512,
            mode: AttentionMode::Group,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }

    /// Small profile for tests and desk experiments: 2 layers, `d = 16`.
    pub fn desk(channels: usize) -> Self {
        Self {
            d_model: 16,
            layers: 2,
            ..Self::standard(channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("window", self.window),
            ("stride", self.stride),
            ("n_max", self.n_max),
            ("kmeans_iters", self.kmeans_iters),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} heads do not divide d_model = {}", self.heads, self.d_model),
            ));
        }
        if !(self.epsilon > 1.0) {
            return Err(Error::config("epsilon", format!("{} must exceed 1", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("{} must lie in (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Attention, residual, layer norm, feed-forward, residual, layer norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attention: AttentionLayer,
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub ff1: Matrix,
    pub ff1_bias: Matrix,
    pub ff2: Matrix,
    pub ff2_bias: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
}

impl EncoderBlock {
    fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = 4 * d;
        Ok(Self {
            attention: AttentionLayer::random(d, d, d, heads, rng)?,
            ln1_gamma: Matrix::filled(1, d, 1.0),
            ln1_beta: Matrix::zeros(1, d),
            ff1: Matrix::random_normal(d, hidden, (2.0 / (d + hidden) as f64).sqrt(), rng),
            ff1_bias: Matrix::zeros(1, hidden),
            ff2: Matrix::random_normal(hidden, d, (2.0 / (d + hidden) as f64).sqrt(), rng),
            ff2_bias: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, 1.0),
            ln2_beta: Matrix::zeros(1, d),
        })
    }

    fn params(&self) -> [&Matrix; 11] {
        [
            &self.attention.w_q,
            &self.attention.w_k,
            &self.attention.w_v,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ff1,
            &self.ff1_bias,
            &self.ff2,
            &self.ff2_bias,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 11] {
        [
            &mut self.attention.w_q,
            &mut self.attention.w_k,
            &mut self.attention.w_v,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ff1,
            &mut self.ff1_bias,
            &mut self.ff2,
            &mut self.ff2_bias,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// `softmax(z·W + b)` over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl ClassifierHead {
    pub fn zeros(d: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(d, classes),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedder: EmbedderVars,
    pub blocks: Vec<[Var; 11]>,
    pub head: Option<(Var, Var)>,
}

impl ModelVars {
    /// Every handle in [`Model::params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let e = &self.embedder;
        let mut out = vec![e.kernel, e.bias, e.positions, e.cls, e.decoder, e.decoder_bias];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        if let Some((w, b)) = self.head {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Handles of the embedder and blocks only.
    pub fn encoder(&self) -> Vec<Var> {
        let mut all = self.all();
        if self.head.is_some() {
            all.truncate(all.len() - 2);
        }
        all
    }
}

/// Result of [`Model::forward`].
pub struct Forward {
    /// `(n + 1) × d` hidden states; row 0 is the CLS slot.
    pub hidden: Var,
    /// Keys per layer per head (group mode only).
    pub keys: Vec<Vec<Matrix>>,
    /// Groupings per layer per head (group mode only).
    pub groupings: Vec<Vec<Grouping>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub embedder: ConvEmbedder,
    pub blocks: Vec<EncoderBlock>,
    pub schedulers: Vec<SchedulerState>,
    pub head: Option<ClassifierHead>,
    /// Whether scheduler group counts were sized to real data yet.
    pub groups_initialized: bool,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedder = ConvEmbedder::new(
            config.d_model,
            config.channels,
            config.window,
            config.stride,
            config.n_max,
            &mut rng,
        )?;
        let blocks = (0..config.layers)
            .map(|_| EncoderBlock::new(config.d_model, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let initial = SchedulerState::initial_groups(config.n_max + 1);
        let schedulers = (0..config.layers)
            .map(|_| SchedulerState::new(config.epsilon, config.alpha, initial))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embedder,
            blocks,
            schedulers,
            head: None,
            groups_initialized: false,
        })
    }

    /// Sizes every scheduler for sequences of `t` timestamps, once.
    pub fn ensure_groups(&mut self, t: usize) -> Result<()> {
        if !self.groups_initialized {
            let rows = self.embedder.n_windows(t)? + 1;
            let initial = SchedulerState::initial_groups(rows);
            for s in &mut self.schedulers {
                s.n_current = initial as f64;
            }
            self.groups_initialized = true;
        }
        Ok(())
    }

    /// Current integer group count per layer for sequences of `rows` rows.
    pub fn group_counts(&self, rows: usize) -> Vec<usize> {
        self.schedulers.iter().map(|s| s.group_count(rows)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let e = &mut self.embedder;
        let mut out: Vec<&mut Matrix> = vec![
            &mut e.kernel,
            &mut e.bias,
            &mut e.positions,
            &mut e.cls,
            &mut e.decoder,
            &mut e.decoder_bias,
        ];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        if let Some(h) = &mut self.head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        let e = &self.embedder;
        let mut n = [&e.kernel, &e.bias, &e.positions, &e.cls, &e.decoder, &e.decoder_bias]
            .iter()
            .map(|m| m.data().len())
            .sum::<usize>();
        for b in &self.blocks {
            n += b.params().iter().map(|m| m.data().len()).sum::<usize>();
        }
        if let Some(h) = &self.head {
            n += h.weight.data().len() + h.bias.data().len();
        }
        n
    }

    pub fn leaves(&self, tape: &mut GradTape) -> ModelVars {
        let embedder = self.embedder.leaves(tape);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.params().map(|m| tape.leaf(m.clone())))
            .collect();
        let head = self
            .head
            .as_ref()
            .map(|h| (tape.leaf(h.weight.clone()), tape.leaf(h.bias.clone())));
        ModelVars { embedder, blocks, head }
    }

    fn grouping_seed(&self, layer: usize, head: usize) -> u64 {
        self.config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((layer as u64) << 32 | head as u64)
    }

    /// Embeds `ts` with a CLS slot and runs every block.
    pub fn forward(&self, tape: &mut GradTape, vars: &ModelVars, ts: &Timeseries) -> Result<Forward> {
        let mut h = self.embedder.tape_embed(tape, &vars.embedder, ts, true)?;
        let rows = tape.value(h).rows();
        let mut keys = Vec::new();
        let mut groupings = Vec::new();
        for (layer, (block, bv)) in self.blocks.iter().zip(&vars.blocks).enumerate() {
            let heads = block.attention.heads;
            let scale = block.attention.scale();
            let q = tape.matmul(h, bv[0])?;
            let k = tape.matmul(h, bv[1])?;
            let v = tape.matmul(h, bv[2])?;
            let dk = block.attention.head_dim_k();
            let dv = block.attention.head_dim_v();
            let mut outs = Vec::with_capacity(heads);
            let mut layer_keys = Vec::new();
            let mut layer_groups = Vec::new();
            for head in 0..heads {
                let qh = tape.slice_cols(q, head * dk, (head + 1) * dk)?;
                let kh = tape.slice_cols(k, head * dk, (head + 1) * dk)?;
                let vh = tape.slice_cols(v, head * dv, (head + 1) * dv)?;
                let o = match self.config.mode {
                    AttentionMode::Vanilla => tape_attention(tape, qh, kh, vh, scale)?,
                    AttentionMode::Group => {
                        let n_groups = self.schedulers[layer].group_count(rows);
                        let key_values = tape.value(kh).clone();
                        let g = kmeans_group(
                            &key_values,
                            n_groups,
                            self.config.kmeans_iters,
                            self.grouping_seed(layer, head),
                        )?;
                        let reps = tape_group_means(tape, kh, &g)?;
                        let o = tape_group_attention(tape, qh, reps, vh, &g, scale)?;
                        layer_keys.push(key_values);
                        layer_groups.push(g);
                        o
                    }
                };
                outs.push(o);
            }
            let attn = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let x = tape.add(h, attn)?;
            let x = tape.layer_norm(x, bv[3], bv[4], LN_EPS)?;
            let f = tape.matmul(x, bv[5])?;
            let f = tape.add_row(f, bv[6])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, bv[7])?;
            let f = tape.add_row(f, bv[8])?;
            let y = tape.add(x, f)?;
            h = tape.layer_norm(y, bv[9], bv[10], LN_EPS)?;
            keys.push(layer_keys);
            groupings.push(layer_groups);
        }
        Ok(Forward {
            hidden: h,
            keys,
            groupings,
        })
    }

    /// Reconstruction of `ts` through the decoder, `t × m`.
    pub fn reconstruct(&self, tape: &mut GradTape, vars: &ModelVars, ts: &Timeseries) -> Result<(Var, Forward)> {
        let fwd = self.forward(tape, vars, ts)?;
        let rows = tape.value(fwd.hidden).rows();
        let body = tape.slice_rows(fwd.hidden, 1, rows)?;
        let out = self.embedder.tape_decode(tape, &vars.embedder, body, ts.len())?;
        Ok((out, fwd))
    }

    /// Final hidden state of the CLS slot.
    pub fn cls_embedding(&self, ts: &Timeseries) -> Result<Vec<f64>> {
        let mut tape = GradTape::new();
        let vars = self.leaves(&mut tape);
        let fwd = self.forward(&mut tape, &vars, ts)?;
        Ok(tape.value(fwd.hidden).row(0).to_vec())
    }

    /// Hidden states without recording gradients beyond this call.
    pub fn encode(&self, ts: &Timeseries) -> Result<Matrix> {
        let mut tape = GradTape::new();
        let vars = self.leaves(&mut tape);
        let fwd = self.forward(&mut tape, &vars, ts)?;
        Ok(tape.value(fwd.hidden).clone())
    }
}

/// Everything needed to reproduce evaluation outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub scaler: Scaler,
}

impl Checkpoint {
    pub fn new(model: Model, scaler: Scaler) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model,
            scaler,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
