//! Style encoder: strided 1-D convolutions over `[expression ; PPG]` frames
//! followed by an LSTM whose final state is read out as a fixed-length feature.

use ndarray::Array2;
use rand::Rng;

use super::{Batch, ModelConfig};
use crate::autograd::nn::{Linear, LstmCell};
use crate::autograd::{Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    convs: Vec<Linear>,
    lstm: LstmCell,
    readout: Linear,
    kernel: usize,
    stride: usize,
}

/// Output length of one strided stage.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Row indices feeding each output position of a stage, edge-replicated at both ends.
fn window_indices(lengths: &[usize], max_in: usize, kernel: usize, stride: usize) -> (Vec<usize>, usize) {
    let max_out = conv_out_len(max_in, stride);
    let half = (kernel as isize - 1) / 2;
    let mut idx = Vec::with_capacity(lengths.len() * max_out * kernel);
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..max_out {
            for j in 0..kernel {
                let pos = (stride * t) as isize + j as isize - half;
                let clamped = pos.clamp(0, len as isize - 1) as usize;
                idx.push(b * max_in + clamped);
            }
        }
    }
    (idx, max_out)
}

impl StyleEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut width = cfg.expr_dim + cfg.ppg_dim;
        let convs = (0..cfg.enc_stages)
            .map(|i| {
                let l =
                    Linear::new(store, &format!("style_enc.conv{i}"), cfg.enc_kernel * width, cfg.enc_channels, rng);
                width = cfg.enc_channels;
                l
            })
            .collect();
        let lstm = LstmCell::new(store, "style_enc.lstm", width, cfg.enc_hidden, rng);
        let readout = Linear::new(store, "style_enc.readout", cfg.enc_hidden, cfg.style_dim, rng);
        Self { convs, lstm, readout, kernel: cfg.enc_kernel, stride: cfg.enc_stride }
    }

    /// `B x style_dim` features, one per sequence.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch) -> Var {
        let input =
            ndarray::concatenate(ndarray::Axis(1), &[batch.expr.view(), batch.ppg.view()]).expect("batch rows agree");
        let mut x = g.constant(input.mapv(|v| T::from_f64(v).unwrap()));
        let mut lengths = batch.lengths.clone();
        let mut max_len = batch.max_len;
        for conv in &self.convs {
            let (idx, max_out) = window_indices(&lengths, max_len, self.kernel, self.stride);
            let cols = g.unfold(x, idx, self.kernel);
            let y = conv.forward(g, store, cols);
            x = g.tanh(y);
            lengths.iter_mut().for_each(|l| *l = conv_out_len(*l, self.stride));
            max_len = max_out;
        }

        let b = lengths.len();
        let hidden = self.lstm.hidden;
        let gates_all = self.lstm.input_gates(g, store, x);
        let mut h = g.constant(Array2::zeros((b, hidden)));
        let mut c = g.constant(Array2::zeros((b, hidden)));
        for t in 0..max_len {
            let rows: Vec<usize> = (0..b).map(|i| i * max_len + t).collect();
            let gx = g.gather_rows(gates_all, rows);
            let (h_new, c_new) = self.lstm.step(g, store, gx, h, c);
            if lengths.iter().all(|&l| t < l) {
                h = h_new;
                c = c_new;
            } else {
                // sequences that already ended keep their final state
                let mask = Array2::from_shape_fn((b, 1), |(i, _)| if t < lengths[i] { T::one() } else { T::zero() });
                let m = g.constant(mask);
                h = masked_update(g, h, h_new, m);
                c = masked_update(g, c, c_new, m);
            }
        }
        self.readout.forward(g, store, h)
    }
}

/// `old + m * (new - old)` with a `B x 1` mask.
fn masked_update<T: Scalar>(g: &mut Graph<T>, old: Var, new: Var, m: Var) -> Var {
    let d = g.sub(new, old);
    let md = g.mul_col(d, m);
    g.add(old, md)
}
