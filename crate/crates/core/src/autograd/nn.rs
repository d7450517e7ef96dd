//! Parameterized building blocks shared by the encoder, enhancer and decoder.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Scalar, Var};

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.w"), input, output, rng);
        let b = store.add_filled(format!("{name}.b"), 1, output, 0.0);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wx = store.add_xavier(format!("{name}.wx"), input, 4 * hidden, rng);
        let wh = store.add_xavier(format!("{name}.wh"), hidden, 4 * hidden, rng);
        let mut bias = ndarray::Array2::zeros((1, 4 * hidden));
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(T::one());
        let b = store.add(format!("{name}.b"), bias);
        Self { wx, wh, b, hidden }
    }

    /// Input contribution `x Wx + b` for many rows at once.
    pub fn input_gates<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let wx = g.param(store, self.wx);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, wx);
        g.add_row(xw, b)
    }

    /// One step given precomputed input gates; returns `(h, c)`.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, gates_x: Var, h: Var, c: Var) -> (Var, Var) {
        let wh = g.param(store, self.wh);
        let hw = g.matmul(h, wh);
        let gates = g.add(gates_x, hw);
        let n = self.hidden;
        let i = g.slice_cols(gates, 0, n);
        let f = g.slice_cols(gates, n, 2 * n);
        let cc = g.slice_cols(gates, 2 * n, 3 * n);
        let o = g.slice_cols(gates, 3 * n, 4 * n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cc = g.tanh(cc);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cc);
        let c_new = g.add(keep, write);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add_filled(format!("{name}.gamma"), 1, dim, 1.0);
        let beta = store.add_filled(format!("{name}.beta"), 1, dim, 0.0);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = g.layer_norm(x, T::from_f64(Self::EPS).unwrap());
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul_row(n, gamma);
        g.add_row(scaled, beta)
    }
}
