use ndarray::{Array2, Axis};

use super::BlendshapeProxy;
use crate::error::{Error, Result};
use crate::store::NamedTensorArchive;

const TIE_TOL: f64 = 1e-12;

/// Partition of the expression dimensions into speech-weak and speech-strong sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionSplit {
    pub weak_ids: Vec<usize>,
    pub strong_ids: Vec<usize>,
    pub threshold: f64,
}

impl ExpressionSplit {
    pub fn new(weak_ids: Vec<usize>, strong_ids: Vec<usize>, threshold: f64) -> Result<Self> {
        let d = weak_ids.len() + strong_ids.len();
        let mut seen = vec![false; d];
        for &i in weak_ids.iter().chain(&strong_ids) {
            if i >= d || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("split index {i} repeated or out of range")));
            }
        }
        Ok(Self { weak_ids, strong_ids, threshold })
    }

    pub fn dims(&self) -> usize {
        self.weak_ids.len() + self.strong_ids.len()
    }

    /// Column slices `(weak, strong)` of an `N x D` matrix.
    pub fn split(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.dims() {
            return Err(Error::Shape(format!("{} columns for a {}-dim split", x.ncols(), self.dims())));
        }
        Ok((x.select(Axis(1), &self.weak_ids), x.select(Axis(1), &self.strong_ids)))
    }

    pub fn write_into(&self, prefix: &str, a: &mut NamedTensorArchive) -> Result<()> {
        a.push_index_vec(&format!("{prefix}weak_ids"), &self.weak_ids)?;
        a.push_index_vec(&format!("{prefix}strong_ids"), &self.strong_ids)?;
        a.push_f64_vec(&format!("{prefix}threshold"), &[self.threshold])
    }

    pub fn read_from(prefix: &str, a: &NamedTensorArchive) -> Result<Self> {
        let threshold = a.f64_values(&format!("{prefix}threshold"))?;
        Self::new(
            a.index_values(&format!("{prefix}weak_ids"))?,
            a.index_values(&format!("{prefix}strong_ids"))?,
            threshold.first().copied().unwrap_or(0.0),
        )
    }
}

/// Marks the `n_strong` parameters with the largest mouth offset as speech-strong.
///
/// The threshold is the midpoint between the last strong and first weak offset.
/// Index lists are returned in ascending order.
pub fn categorize_expressions(proxy: &BlendshapeProxy, n_strong: usize) -> Result<ExpressionSplit> {
    let d = proxy.num_params();
    if n_strong == 0 || n_strong >= d {
        return Err(Error::InvalidArgument(format!("n_strong = {n_strong} must lie in (0, {d})")));
    }
    let offsets = (0..d).map(|i| proxy.max_mouth_offset(i)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| offsets[b].total_cmp(&offsets[a]).then(a.cmp(&b)));
    let (last_strong, first_weak) = (offsets[order[n_strong - 1]], offsets[order[n_strong]]);
    if last_strong - first_weak < TIE_TOL {
        return Err(Error::Degenerate(format!("tie at the cut: offsets {last_strong} and {first_weak}")));
    }
    let mut strong_ids = order[..n_strong].to_vec();
    let mut weak_ids = order[n_strong..].to_vec();
    strong_ids.sort_unstable();
    weak_ids.sort_unstable();
    ExpressionSplit::new(weak_ids, strong_ids, 0.5 * (last_strong + first_weak))
}
