use ndarray::{s, Array2};

use crate::error::{Error, Result};

/// Variable-length sequences padded to a common length and stacked
/// sequence-major: row `b * max_len + t` holds frame `t` of sequence `b`.
/// Padding rows are zero and excluded from every loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub expr: Array2<f64>,
    pub ppg: Array2<f64>,
}

impl Batch {
    /// `items` are `(expression N x D, PPG aligned to N frames N x P)` pairs.
    pub fn new(items: &[(&Array2<f64>, &Array2<f64>)]) -> Result<Self> {
        let max_len = items.iter().map(|(x, _)| x.nrows()).max().unwrap_or(0);
        Self::padded(items, max_len)
    }

    pub fn padded(items: &[(&Array2<f64>, &Array2<f64>)], max_len: usize) -> Result<Self> {
        let Some((x0, a0)) = items.first() else {
            return Err(Error::Shape("empty batch".into()));
        };
        let (d, p) = (x0.ncols(), a0.ncols());
        let mut expr = Array2::zeros((items.len() * max_len, d));
        let mut ppg = Array2::zeros((items.len() * max_len, p));
        let mut lengths = Vec::with_capacity(items.len());
        for (b, (x, a)) in items.iter().enumerate() {
            let n = x.nrows();
            if n == 0 || n > max_len {
                return Err(Error::Shape(format!("sequence of {n} frames in a batch padded to {max_len}")));
            }
            if a.nrows() != n {
                return Err(Error::Shape(format!("PPG has {} frames, expression has {n}; align first", a.nrows())));
            }
            if x.ncols() != d || a.ncols() != p {
                return Err(Error::Shape("inconsistent feature widths in batch".into()));
            }
            let r = b * max_len;
            expr.slice_mut(s![r..r + n, ..]).assign(x);
            ppg.slice_mut(s![r..r + n, ..]).assign(a);
            lengths.push(n);
        }
        Ok(Self { lengths, max_len, expr, ppg })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.max_len + t
    }

    pub fn valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }
}
