//! Tape-based reverse-mode differentiation over 2-D arrays.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Vectors are `1 x d` rows and batches are stacked rows.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    Recip(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    Unfold(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm(Var),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Op-specific saved state (e.g. inverse std for layer norm).
    aux: Option<Array2<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter in `store`; parameters not on the tape get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Array2<T>> {
        let mut out: Vec<Array2<T>> = store.values().iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = c::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = c::<T>(0.044715);
    let half = c::<T>(0.5);
    let one = T::one();
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * k * (one + c::<T>(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad, aux: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn row_constant(&mut self, values: &[T]) -> Var {
        let a = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row");
        self.constant(a)
    }

    /// Leaf bound to a parameter; repeated calls within one graph return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a . b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 x C` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "mul_row expects a single row");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulRow(a, b), &[a, b])
    }

    /// Scales row `i` of `a` by `b[i, 0]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).ncols(), 1, "mul_col expects a single column");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulCol(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(T::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.value(a).mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(T::recip);
        self.push(v, Op::Recip(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, idx), &[a])
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack_rows: column counts differ");
        self.push(v, Op::StackRows(parts.to_vec()), parts)
    }

    /// Windowed gather: with `k = idx.len() / rows_out`, output row `r` is the
    /// concatenation of input rows `idx[r*k .. (r+1)*k]`.
    pub fn unfold(&mut self, a: Var, idx: Vec<usize>, k: usize) -> Var {
        let x = self.value(a);
        let cols = x.ncols();
        assert!(k > 0 && idx.len().is_multiple_of(k), "unfold: index count not a multiple of window");
        let rows = idx.len() / k;
        let mut v = Array2::zeros((rows, k * cols));
        for r in 0..rows {
            for j in 0..k {
                v.slice_mut(s![r, j * cols..(j + 1) * cols]).assign(&x.row(idx[r * k + j]));
            }
        }
        self.push(v, Op::Unfold(a, idx), &[a])
    }

    /// `R x C -> R x 1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.ncols()).unwrap();
        let mut v = x.clone();
        let mut inv_std = Array2::zeros((x.nrows(), 1));
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            row.mapv_inplace(|x| x - mean);
            let var = row.fold(T::zero(), |s, &x| s + x * x) / n;
            let is = (var + eps).sqrt().recip();
            row.mapv_inplace(|x| x * is);
            inv_std[[i, 0]] = is;
        }
        let var = self.push(v, Op::LayerNorm(a), &[a]);
        self.nodes[var.0].aux = Some(inv_std);
        var
    }

    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Array2<T>>], v: Var, f: impl FnOnce(&mut Array2<T>)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array2::zeros(self.nodes[v.0].value.raw_dim()));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let one = T::one();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g * self.value(*b));
                self.acc(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, b) => {
                self.acc(grads, *a, g * self.value(*b));
                let gb = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(grads, *b, gb);
            }
            Op::MulCol(a, b) => {
                self.acc(grads, *a, g * self.value(*b));
                let gb = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d = *d * (one - y * y));
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d = *d * y * (one - y));
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * y),
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d = *d * gelu_parts(x).1);
                self.acc(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = T::zero();
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Recip(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d = -*d * y * y);
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.nodes[p.0].needs_grad {
                        self.acc(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.ncols();
                self.acc_with(grads, *a, |ga| {
                    let mut dst = ga.slice_mut(s![.., *start..*start + w]);
                    dst += g;
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc_with(grads, *a, |ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.nodes[p.0].needs_grad {
                        self.acc(grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::Unfold(a, idx) => {
                let cols = self.value(*a).ncols();
                let k = g.ncols() / cols;
                self.acc_with(grads, *a, |ga| {
                    for r in 0..g.nrows() {
                        for j in 0..k {
                            let mut dst = ga.row_mut(idx[r * k + j]);
                            dst += &g.slice(s![r, j * cols..(j + 1) * cols]);
                        }
                    }
                });
            }
            Op::RowSum(a) => {
                let shape = self.value(*a).raw_dim();
                let d = g.broadcast(shape).expect("column broadcast").to_owned();
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(yrow).for_each(|r, &yv| *r = *r - yv * s);
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm(a) => {
                let inv_std = node.aux.as_ref().expect("layer norm saves inv std");
                let n = T::from_usize(y.ncols()).unwrap();
                let mut d = g.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let mean_g = row.sum() / n;
                    let mean_gy = row.iter().zip(yr.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
                    let is = inv_std[[r, 0]];
                    Zip::from(&mut row).and(yr).for_each(|gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                }
                self.acc(grads, *a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at `x`.
    fn numeric(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let f = |xv: &Array2<f64>| {
            let mut g = Graph::new();
            let mut store = ParamStore::new();
            let id = store.add("x", xv.clone());
            let v = g.param(&store, id);
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let id = store.add("x", x.clone());
        let v = g.param(&store, id);
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).unwrap().clone();
        let num = numeric(&x, &f);
        let err = (&analytic - &num).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "analytic {analytic:?} numeric {num:?}");
    }

    fn x0() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    fn weights(g: &mut Graph<f64>, v: Var) -> Var {
        let w = g.constant(array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]]);
        let p = g.mul(v, w);
        g.sum(p)
    }

    #[test]
    fn grad_matmul() {
        check(x0(), |g, v| {
            let b = g.constant(array![[1.0, 2.0], [0.5, -1.0], [0.3, 0.2]]);
            let m = g.matmul(v, b);
            let t = g.tanh(m);
            g.sum(t)
        });
        check(x0(), |g, v| {
            let b = g.constant(array![[1.0, 2.0, 0.5], [0.5, -1.0, 0.1]]);
            let m = g.matmul_t(v, b);
            let m2 = g.matmul_t(m, m);
            g.sum(m2)
        });
    }

    #[test]
    fn grad_elementwise() {
        check(x0(), |g, v| {
            let a = g.sigmoid(v);
            let b = g.exp(v);
            let c = g.mul(a, b);
            let d = g.gelu(c);
            let e = g.sub(d, v);
            let f = g.add_scalar(e, 3.0);
            let r = g.recip(f);
            weights(g, r)
        });
        check(x0(), |g, v| {
            let a = g.clamp(v, -1.0, 1.0);
            let b = g.scale(a, 3.0);
            let sq = g.mul(b, v);
            weights(g, sq)
        });
    }

    #[test]
    fn grad_broadcasts() {
        check(x0(), |g, v| {
            let r = g.slice_cols(v, 0, 3);
            let row = g.gather_rows(r, vec![1]);
            let a = g.add_row(v, row);
            let b = g.mul_row(a, row);
            let col = g.row_sum(v);
            let c = g.mul_col(b, col);
            weights(g, c)
        });
    }

    #[test]
    fn grad_structural() {
        check(x0(), |g, v| {
            let a = g.slice_cols(v, 1, 3);
            let b = g.concat_cols(&[v, a]);
            let c = g.gather_rows(b, vec![1, 0, 1]);
            let d = g.stack_rows(&[c, b]);
            let e = g.unfold(d, vec![0, 1, 3, 2, 4, 0], 2);
            let t = g.tanh(e);
            g.sum(t)
        });
    }

    #[test]
    fn grad_softmax_layernorm() {
        check(x0(), |g, v| {
            let s = g.softmax_rows(v);
            weights(g, s)
        });
        check(x0(), |g, v| {
            let s = g.layer_norm(v, 1e-5);
            weights(g, s)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(array![[1000.0, 1001.0], [-3.0, 2.0]]);
        let s = g.softmax_rows(v);
        for r in g.value(s).rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(array![[1.0]]);
        let b = g.tanh(a);
        let grads = g.backward(b);
        assert!(grads.wrt(a).is_none());
    }
}
