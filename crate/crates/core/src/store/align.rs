use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Source position (in frame units) sampled by output row `i` of `n`.
pub fn source_position(i: usize, src_len: usize, n: usize) -> f64 {
    if n == 1 {
        (src_len - 1) as f64 / 2.0
    } else {
        (i * (src_len - 1)) as f64 / (n - 1) as f64
    }
}

/// Linear-interpolation resampling of a `T x d` sequence onto `n` rows.
///
/// Output row `i` samples source time `i (T-1) / (n-1)`; a single output row
/// samples the temporal midpoint.
pub fn align_time(seq: &Array2<f64>, n: usize) -> Result<Array2<f64>> {
    let t = seq.nrows();
    if t == 0 || n == 0 {
        return Err(Error::Shape(format!("cannot align {t} frames onto {n}")));
    }
    let mut out = Array2::zeros((n, seq.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let pos = source_position(i, t, n);
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let w = pos - lo as f64;
        if w == 0.0 {
            row.assign(&seq.row(lo));
        } else {
            Zip::from(&mut row).and(seq.row(lo)).and(seq.row(hi)).for_each(|o, &a, &b| *o = a + w * (b - a));
        }
    }
    Ok(out)
}
