//! Linear blendshape face model used in place of a full parametric face model.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::store::NamedTensorArchive;

pub const DEFAULT_VERTICES: usize = 468;
pub const DEFAULT_PARAMS: usize = 233;
pub const DEFAULT_STRONG: usize = 85;
pub const DEFAULT_PROXY_SEED: u64 = 0x5eed_face;

const JITTER: f64 = 0.01;

/// Mesh = `base_vertices + sum_i expr_i * deltas[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeProxy {
    base_vertices: Array2<f64>,
    deltas: Array3<f64>,
    mouth_vertex_ids: Vec<usize>,
    landmark_ids: Vec<usize>,
    mouth_landmark_ids: Vec<usize>,
    param_range: Vec<f64>,
}

impl BlendshapeProxy {
    pub fn new(
        base_vertices: Array2<f64>,
        deltas: Array3<f64>,
        mouth_vertex_ids: Vec<usize>,
        landmark_ids: Vec<usize>,
        mouth_landmark_ids: Vec<usize>,
        param_range: Vec<f64>,
    ) -> Result<Self> {
        let m = base_vertices.nrows();
        if base_vertices.ncols() != 3 {
            return Err(Error::Shape(format!("base vertices are {}-D", base_vertices.ncols())));
        }
        let (d, dm, dc) = deltas.dim();
        if dm != m || dc != 3 {
            return Err(Error::Shape(format!("deltas {:?} do not match {m} vertices", deltas.dim())));
        }
        if param_range.len() != d {
            return Err(Error::Shape(format!("{} ranges for {d} parameters", param_range.len())));
        }
        if param_range.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("parameter ranges must be positive".into()));
        }
        if deltas.iter().chain(base_vertices.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("proxy geometry".into()));
        }
        for (what, ids) in
            [("mouth vertex", &mouth_vertex_ids), ("landmark", &landmark_ids), ("mouth landmark", &mouth_landmark_ids)]
        {
            if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
                return Err(Error::InvalidArgument(format!("{what} id {bad} out of range for {m} vertices")));
            }
        }
        let lm: HashSet<usize> = landmark_ids.iter().copied().collect();
        if !mouth_landmark_ids.iter().all(|i| lm.contains(i)) {
            return Err(Error::InvalidArgument("mouth landmarks must be a subset of the landmarks".into()));
        }
        Ok(Self { base_vertices, deltas, mouth_vertex_ids, landmark_ids, mouth_landmark_ids, param_range })
    }

    pub fn num_vertices(&self) -> usize {
        self.base_vertices.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.deltas.dim().0
    }

    pub fn base_vertices(&self) -> &Array2<f64> {
        &self.base_vertices
    }

    pub fn deltas(&self) -> &Array3<f64> {
        &self.deltas
    }

    pub fn mouth_vertex_ids(&self) -> &[usize] {
        &self.mouth_vertex_ids
    }

    pub fn landmark_ids(&self) -> &[usize] {
        &self.landmark_ids
    }

    /// Mouth landmarks as vertex ids.
    pub fn mouth_landmark_ids(&self) -> &[usize] {
        &self.mouth_landmark_ids
    }

    /// Mouth landmarks as positions within [`Self::landmark_ids`], for LMD-m.
    pub fn mouth_landmark_positions(&self) -> Vec<usize> {
        self.mouth_landmark_ids
            .iter()
            .map(|v| self.landmark_ids.iter().position(|l| l == v).expect("checked on construction"))
            .collect()
    }

    pub fn param_range(&self) -> &[f64] {
        &self.param_range
    }

    pub fn decode_mesh(&self, expr: ArrayView1<f64>) -> Result<Array2<f64>> {
        let (d, m, _) = self.deltas.dim();
        if expr.len() != d {
            return Err(Error::Shape(format!("expression of length {} for {d} parameters", expr.len())));
        }
        let flat = self.deltas.view().into_shape_with_order((d, m * 3)).expect("contiguous deltas");
        let offset = expr.dot(&flat).into_shape_with_order((m, 3)).expect("m*3 values");
        Ok(&self.base_vertices + &offset)
    }

    /// Largest mouth-vertex displacement when parameter `param_id` sweeps `[-r, r]`.
    ///
    /// The proxy is linear, so the extreme sits at an endpoint of the sweep.
    pub fn max_mouth_offset(&self, param_id: usize) -> Result<f64> {
        if param_id >= self.num_params() {
            return Err(Error::InvalidArgument(format!(
                "parameter {param_id} out of range for {} parameters",
                self.num_params()
            )));
        }
        let delta = self.deltas.index_axis(Axis(0), param_id);
        let r = self.param_range[param_id];
        let max_norm =
            self.mouth_vertex_ids.iter().map(|&v| delta.row(v).dot(&delta.row(v)).sqrt()).fold(0.0f64, f64::max);
        Ok(r * max_norm)
    }

    pub fn extract_landmarks(&self, vertices: &Array2<f64>) -> Result<Array2<f64>> {
        gather_rows(vertices, &self.landmark_ids)
    }

    pub fn to_archive(&self) -> Result<NamedTensorArchive> {
        let mut a = NamedTensorArchive::new();
        a.push_f64_matrix("base_vertices", &self.base_vertices)?;
        let (d, m, c) = self.deltas.dim();
        a.push(
            "deltas",
            vec![d as u64, m as u64, c as u64],
            crate::store::TensorData::F64(self.deltas.iter().copied().collect()),
        )?;
        a.push_index_vec("mouth_vertex_ids", &self.mouth_vertex_ids)?;
        a.push_index_vec("landmark_ids", &self.landmark_ids)?;
        a.push_index_vec("mouth_landmark_ids", &self.mouth_landmark_ids)?;
        a.push_f64_vec("param_range", &self.param_range)?;
        Ok(a)
    }

    pub fn from_archive(a: &NamedTensorArchive) -> Result<Self> {
        let base = a.f64_matrix("base_vertices")?;
        let t = a.get("deltas").ok_or_else(|| Error::MissingTensor("deltas".into()))?;
        let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        let [d, m, c] = dims[..] else {
            return Err(Error::Shape(format!("deltas dims {dims:?}")));
        };
        let deltas =
            Array3::from_shape_vec((d, m, c), a.f64_values("deltas")?).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(
            base,
            deltas,
            a.index_values("mouth_vertex_ids")?,
            a.index_values("landmark_ids")?,
            a.index_values("mouth_landmark_ids")?,
            a.f64_values("param_range")?,
        )
    }

    /// The bundled proxy: 468 vertices, 233 parameters of which exactly 85
    /// displace the mouth region strongly.
    pub fn default_proxy() -> Self {
        generate_proxy(DEFAULT_PROXY_SEED, DEFAULT_PARAMS, DEFAULT_STRONG)
    }
}

pub(crate) fn gather_rows(m: &Array2<f64>, ids: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= m.nrows()) {
        return Err(Error::InvalidArgument(format!("row {bad} out of range for {} rows", m.nrows())));
    }
    Ok(m.select(Axis(0), ids))
}

fn is_mouth(p: ArrayView1<f64>) -> bool {
    p[0].abs() < 0.35 && p[1] > -0.72 && p[1] < -0.28
}

/// Deterministic proxy with `n_params` parameters, `n_strong` of them mouth-dominant.
pub fn generate_proxy(seed: u64, n_params: usize, n_strong: usize) -> BlendshapeProxy {
    assert!(n_strong <= n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cols, rows) = (26usize, 18usize);
    let mut base = Array2::zeros((cols * rows, 3));
    for r in 0..rows {
        for c in 0..cols {
            let theta = (-70.0 + 140.0 * c as f64 / (cols - 1) as f64).to_radians();
            let phi = (-65.0 + 130.0 * r as f64 / (rows - 1) as f64).to_radians();
            let mut row = base.row_mut(r * cols + c);
            row[0] = 0.8 * theta.sin() + JITTER * rng.random_range(-1.0..1.0);
            row[1] = phi.sin() + JITTER * rng.random_range(-1.0..1.0);
            row[2] = 0.6 * theta.cos() * phi.cos() + JITTER * rng.random_range(-1.0..1.0);
        }
    }
    let m = base.nrows();
    let mouth: Vec<usize> = (0..m).filter(|&i| is_mouth(base.row(i))).collect();
    let upper: Vec<usize> = (0..m).filter(|&i| base[[i, 1]] > 0.0).collect();

    let mut strong_ids: Vec<usize> = (0..n_params).collect();
    strong_ids.shuffle(&mut rng);
    strong_ids.truncate(n_strong);
    let strong: HashSet<usize> = strong_ids.into_iter().collect();

    let mut deltas = Array3::zeros((n_params, m, 3));
    for p in 0..n_params {
        let (center, amp, width) = if strong.contains(&p) {
            (mouth[rng.random_range(0..mouth.len())], rng.random_range(0.4..1.0), 0.15f64)
        } else {
            (upper[rng.random_range(0..upper.len())], rng.random_range(0.2..1.0), 0.12)
        };
        let mut dir: Array1<f64> = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        dir /= dir.dot(&dir).sqrt();
        let c = base.row(center).to_owned();
        for v in 0..m {
            let d = &base.row(v) - &c;
            let fall = (-d.dot(&d) / (2.0 * width * width)).exp();
            let mut row = deltas.slice_mut(ndarray::s![p, v, ..]);
            row.assign(&(&dir * (amp * fall)));
        }
    }

    let mut non_mouth: Vec<usize> = (0..m).filter(|i| !mouth.contains(i)).collect();
    non_mouth.shuffle(&mut rng);
    let mut mouth_lm = mouth.clone();
    mouth_lm.shuffle(&mut rng);
    mouth_lm.truncate(20);
    mouth_lm.sort_unstable();
    let mut landmarks: Vec<usize> = non_mouth[..48].to_vec();
    landmarks.extend(&mouth_lm);
    landmarks.sort_unstable();

    BlendshapeProxy::new(base, deltas, mouth, landmarks, mouth_lm, vec![1.0; n_params])
        .expect("generated proxy is valid")
}
