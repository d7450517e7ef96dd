//! Least-squares similarity alignment of corresponding 3-D point sets
//! (Umeyama 1991) and the landmark distance metric built on it.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Relative singular-value floor below which the cross-covariance is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Applies the transform to each row of an `L x 3` matrix.
    pub fn apply(&self, points: &Array2<f64>) -> Array2<f64> {
        let mut out = points.clone();
        for mut row in out.rows_mut() {
            let q = self.apply_point(Vector3::new(row[0], row[1], row[2]));
            row[0] = q.x;
            row[1] = q.y;
            row[2] = q.z;
        }
        out
    }
}

fn rows3(m: &Array2<f64>) -> Vec<Vector3<f64>> {
    m.rows().into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()
}

/// Similarity `(s, R, t)` minimizing `sum_j |s R src_j + t - dst_j|^2`.
pub fn umeyama_align(src: &Array2<f64>, dst: &Array2<f64>) -> Result<SimilarityTransform> {
    if src.ncols() != 3 || dst.ncols() != 3 || src.nrows() != dst.nrows() {
        return Err(Error::Shape(format!("point sets {:?} vs {:?}", src.dim(), dst.dim())));
    }
    let n = src.nrows();
    if n < 3 {
        return Err(Error::Degenerate(format!("{n} points, need at least 3")));
    }
    let (s, d) = (rows3(src), rows3(dst));
    if s.iter().chain(&d).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("landmarks".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = s.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = d.iter().sum::<Vector3<f64>>() * inv_n;
    let var_s = s.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() * inv_n;
    if var_s <= f64::EPSILON * mu_s.norm_squared().max(1.0) {
        return Err(Error::Degenerate("source points coincide".into()));
    }
    let mut cov = Matrix3::zeros();
    for (ps, pd) in s.iter().zip(&d) {
        cov += (pd - mu_d) * (ps - mu_s).transpose();
    }
    cov *= inv_n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    // nalgebra does not promise an ordering
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if sv[0].1 <= 0.0 || sv[1].1 <= RANK_TOL * sv[0].1 {
        return Err(Error::Degenerate(format!(
            "cross-covariance rank < 2 (singular values {:?})",
            sv.iter().map(|x| x.1).collect::<Vec<_>>()
        )));
    }
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs[sv[2].0] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * signs[i]).sum();
    let scale = trace / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(SimilarityTransform { scale, rotation, translation })
}

/// Landmark distance after per-frame similarity normalization.
///
/// Each frame of `seq_a` is aligned onto the matching frame of `seq_b` using all
/// landmarks; the Euclidean distance is then averaged over `subset` landmarks
/// and over frames.
pub fn lmd(seq_a: &[Array2<f64>], seq_b: &[Array2<f64>], subset: &[usize]) -> Result<f64> {
    if seq_a.len() != seq_b.len() {
        return Err(Error::Shape(format!("{} vs {} frames", seq_a.len(), seq_b.len())));
    }
    if seq_a.is_empty() || subset.is_empty() {
        return Err(Error::Shape("empty sequence or landmark subset".into()));
    }
    let mut total = 0.0;
    for (a, b) in seq_a.iter().zip(seq_b) {
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!("frame shapes {:?} vs {:?}", a.dim(), b.dim())));
        }
        if let Some(&bad) = subset.iter().find(|&&j| j >= a.nrows()) {
            return Err(Error::InvalidArgument(format!("landmark {bad} out of range")));
        }
        let aligned = umeyama_align(a, b)?.apply(a);
        let frame: f64 = subset
            .iter()
            .map(|&j| {
                let diff = &aligned.row(j) - &b.row(j);
                diff.dot(&diff).sqrt()
            })
            .sum();
        total += frame / subset.len() as f64;
    }
    Ok(total / seq_a.len() as f64)
}
