//! Hybrid expression decoder.
//!
//! Speech-weak parameters come from an autoregressive LSTM conditioned on the
//! previous frame, the previous (frame-dropped) PPG frame and the style vector.
//! Speech-strong parameters come from a stack of non-causal transformer blocks
//! over the PPG with the style vector broadcast to every frame.

use ndarray::{Array2, Axis};
use rand::Rng;

use super::{Batch, ModelConfig};
use crate::autograd::nn::{LayerNorm, Linear, LstmCell};
use crate::autograd::{Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::face::ExpressionSplit;

/// Frame-level inverted dropout: frame `t` is zeroed iff `noise[t] < p`;
/// surviving frames are scaled by `1 / (1 - p)`.
pub fn ppg_dropout(ppg: &Array2<f64>, p: f64, noise: &[f64]) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1]")));
    }
    if noise.len() != ppg.nrows() {
        return Err(Error::Shape(format!("{} noise draws for {} frames", noise.len(), ppg.nrows())));
    }
    if p >= 1.0 {
        return Ok(Array2::zeros(ppg.raw_dim()));
    }
    let keep = 1.0 / (1.0 - p);
    let mut out = ppg.clone();
    for (mut row, &u) in out.rows_mut().into_iter().zip(noise) {
        if u < p {
            row.fill(0.0);
        } else if p > 0.0 {
            row *= keep;
        }
    }
    Ok(out)
}

/// Scatters weak and strong columns back to their original indices.
pub fn assemble_expression(weak: &Array2<f64>, strong: &Array2<f64>, split: &ExpressionSplit) -> Result<Array2<f64>> {
    if weak.nrows() != strong.nrows()
        || weak.ncols() != split.weak_ids.len()
        || strong.ncols() != split.strong_ids.len()
    {
        return Err(Error::Shape(format!(
            "weak {:?} / strong {:?} do not fit a {}+{} split",
            weak.dim(),
            strong.dim(),
            split.weak_ids.len(),
            split.strong_ids.len()
        )));
    }
    let mut out = Array2::zeros((weak.nrows(), split.dims()));
    for (src, &dst) in split.weak_ids.iter().enumerate() {
        out.column_mut(dst).assign(&weak.column(src));
    }
    for (src, &dst) in split.strong_ids.iter().enumerate() {
        out.column_mut(dst).assign(&strong.column(src));
    }
    Ok(out)
}

fn to_t<T: Scalar>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(|v| T::from_f64(v).unwrap())
}

/// Row `b * n + t` holds row `b * n + t - 1` of `a` (zero at `t = 0`).
fn shift_in_time(a: &Array2<f64>, batch: &Batch) -> Array2<f64> {
    let mut out = Array2::zeros(a.raw_dim());
    for b in 0..batch.size() {
        for t in 1..batch.max_len {
            out.row_mut(batch.row(b, t)).assign(&a.row(batch.row(b, t - 1)));
        }
    }
    out
}

/// Repeats row `b` of `s` for every frame of sequence `b`.
fn broadcast_style<T: Scalar>(g: &mut Graph<T>, s: Var, batch: &Batch) -> Var {
    let idx = (0..batch.size()).flat_map(|b| std::iter::repeat_n(b, batch.max_len)).collect();
    g.gather_rows(s, idx)
}

#[derive(Clone, Debug)]
pub struct ArDecoder {
    lstm: LstmCell,
    head: Linear,
    weak_dim: usize,
}

impl ArDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, weak_dim: usize, rng: &mut impl Rng) -> Self {
        let input = weak_dim + cfg.ppg_dim + cfg.latent_dim;
        let lstm = LstmCell::new(store, "dec.ar.lstm", input, cfg.ar_hidden, rng);
        let head = Linear::new(store, "dec.ar.head", cfg.ar_hidden, weak_dim, rng);
        Self { lstm, head, weak_dim }
    }

    pub fn weak_dim(&self) -> usize {
        self.weak_dim
    }

    /// `(B * max_len) x weak_dim` predictions.
    ///
    /// `dropped_ppg` is the batch PPG after [`ppg_dropout`]. With `teacher`
    /// (ground-truth weak frames in batch layout) the previous-frame input is
    /// the ground truth; without it, the model's own previous prediction.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        dropped_ppg: &Array2<f64>,
        s: Var,
        teacher: Option<&Array2<f64>>,
    ) -> Var {
        let (bsz, n) = (batch.size(), batch.max_len);
        let hidden = self.lstm.hidden;
        let prev_ppg = shift_in_time(dropped_ppg, batch);
        let mut h = g.constant(Array2::zeros((bsz, hidden)));
        let mut c = g.constant(Array2::zeros((bsz, hidden)));
        let mut outs = Vec::with_capacity(n);
        match teacher {
            Some(x) => {
                let prev_x = g.constant(to_t(&shift_in_time(x, batch)));
                let a = g.constant(to_t(&prev_ppg));
                let sb = broadcast_style(g, s, batch);
                let inp = g.concat_cols(&[prev_x, a, sb]);
                let gates = self.lstm.input_gates(g, store, inp);
                for t in 0..n {
                    let rows = (0..bsz).map(|b| batch.row(b, t)).collect();
                    let gx = g.gather_rows(gates, rows);
                    (h, c) = self.lstm.step(g, store, gx, h, c);
                    outs.push(h);
                }
                let stacked = g.stack_rows(&outs);
                let reorder = (0..bsz).flat_map(|b| (0..n).map(move |t| t * bsz + b)).collect();
                let hs = g.gather_rows(stacked, reorder);
                self.head.forward(g, store, hs)
            }
            None => {
                let mut prev = g.constant(Array2::zeros((bsz, self.weak_dim)));
                for t in 0..n {
                    let rows: Vec<usize> = (0..bsz).map(|b| batch.row(b, t)).collect();
                    let a = g.constant(to_t(&prev_ppg.select(Axis(0), &rows)));
                    let inp = g.concat_cols(&[prev, a, s]);
                    let gx = self.lstm.input_gates(g, store, inp);
                    (h, c) = self.lstm.step(g, store, gx, h, c);
                    prev = self.head.forward(g, store, h);
                    outs.push(prev);
                }
                let stacked = g.stack_rows(&outs);
                let reorder = (0..bsz).flat_map(|b| (0..n).map(move |t| t * bsz + b)).collect();
                g.gather_rows(stacked, reorder)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct NarDecoder {
    input: Linear,
    blocks: Vec<AttentionBlock>,
    final_ln: LayerNorm,
    head: Linear,
    dim: usize,
    heads: usize,
    pub positional_encoding: bool,
}

/// Sinusoidal position table, `n x dim`.
pub fn sinusoidal_table(n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(t, i)| {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        let angle = t as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl NarDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, strong_dim: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.nar_dim;
        let input = Linear::new(store, "dec.nar.input", cfg.ppg_dim + cfg.latent_dim, d, rng);
        let blocks = (0..cfg.nar_blocks)
            .map(|i| {
                let p = format!("dec.nar.block{i}");
                AttentionBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    qkv: Linear::new(store, &format!("{p}.qkv"), d, 3 * d, rng),
                    proj: Linear::new(store, &format!("{p}.proj"), d, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, cfg.nar_ff, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), cfg.nar_ff, d, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "dec.nar.final_ln", d);
        let head = Linear::new(store, "dec.nar.head", d, strong_dim, rng);
        Self {
            input,
            blocks,
            final_ln,
            head,
            dim: d,
            heads: cfg.nar_heads,
            positional_encoding: cfg.positional_encoding,
        }
    }

    /// `(B * max_len) x strong_dim` predictions in one pass.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch, s: Var) -> Var {
        let (bsz, n) = (batch.size(), batch.max_len);
        let a = g.constant(to_t(&batch.ppg));
        let sb = broadcast_style(g, s, batch);
        let inp = g.concat_cols(&[a, sb]);
        let mut x = self.input.forward(g, store, inp);
        if self.positional_encoding {
            let table = sinusoidal_table(n, self.dim);
            let mut pe = Array2::zeros((bsz * n, self.dim));
            for b in 0..bsz {
                pe.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&table);
            }
            let pe = g.constant(to_t(&pe));
            x = g.add(x, pe);
        }
        // additive key-padding masks, one per sequence
        let masks: Vec<Option<Var>> = batch
            .lengths
            .iter()
            .map(|&len| {
                (len < n).then(|| {
                    let m = Array2::from_shape_fn((n, n), |(_, j)| if j < len { 0.0 } else { -1e9 });
                    g.constant(to_t(&m))
                })
            })
            .collect();
        for block in &self.blocks {
            x = self.block_forward(g, store, block, x, bsz, n, &masks);
        }
        let x = self.final_ln.forward(g, store, x);
        self.head.forward(g, store, x)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        blk: &AttentionBlock,
        x: Var,
        bsz: usize,
        n: usize,
        masks: &[Option<Var>],
    ) -> Var {
        let d = self.dim;
        let dk = d / self.heads;
        let scale = T::from_f64(1.0 / (dk as f64).sqrt()).unwrap();
        let y = blk.ln1.forward(g, store, x);
        let qkv = blk.qkv.forward(g, store, y);
        let mut per_seq = Vec::with_capacity(bsz);
        for (b, mask) in masks.iter().enumerate().take(bsz) {
            let rows = qkv_rows(b, n);
            let qkv_b = g.gather_rows(qkv, rows);
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = g.slice_cols(qkv_b, h * dk, (h + 1) * dk);
                let k = g.slice_cols(qkv_b, d + h * dk, d + (h + 1) * dk);
                let v = g.slice_cols(qkv_b, 2 * d + h * dk, 2 * d + (h + 1) * dk);
                let scores = g.matmul_t(q, k);
                let mut scores = g.scale(scores, scale);
                if let Some(m) = mask {
                    scores = g.add(scores, *m);
                }
                let attn = g.softmax_rows(scores);
                heads.push(g.matmul(attn, v));
            }
            per_seq.push(g.concat_cols(&heads));
        }
        let attn = g.stack_rows(&per_seq);
        let attn = blk.proj.forward(g, store, attn);
        let x = g.add(x, attn);
        let y = blk.ln2.forward(g, store, x);
        let hidden = blk.ff1.forward(g, store, y);
        let hidden = g.gelu(hidden);
        let out = blk.ff2.forward(g, store, hidden);
        g.add(x, out)
    }
}

fn qkv_rows(b: usize, n: usize) -> Vec<usize> {
    (b * n..(b + 1) * n).collect()
}
