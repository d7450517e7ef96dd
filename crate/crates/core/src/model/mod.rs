//! The full style-transfer network and its training objective.

pub mod batch;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod enhancer;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::Batch;
pub use config::ModelConfig;
pub use decoder::{assemble_expression, ppg_dropout, ArDecoder, NarDecoder};
pub use encoder::StyleEncoder;
pub use enhancer::{LatentVars, VariationalEnhancer};

use crate::autograd::{Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::face::ExpressionSplit;
use crate::store::NamedTensorArchive;
use crate::variational::asymmetric_weight;

/// Explicit randomness for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNoise {
    /// `B x d_z` reparameterization noise; zeros give the posterior mean.
    pub eps: Array2<f64>,
    /// PPG frame-dropout rate.
    pub dropout: f64,
    /// Per-sequence uniform draws, at least as many as the sequence has frames.
    pub frame_noise: Vec<Vec<f64>>,
}

impl ForwardNoise {
    /// No sampling, no dropout.
    pub fn deterministic(batch: &Batch, latent_dim: usize) -> Self {
        Self {
            eps: Array2::zeros((batch.size(), latent_dim)),
            dropout: 0.0,
            frame_noise: batch.lengths.iter().map(|&n| vec![1.0; n]).collect(),
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub feature: Var,
    pub latent: LatentVars,
    /// `(B * max_len) x weak_dim`
    pub weak: Var,
    /// `(B * max_len) x strong_dim`
    pub strong: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Architecture description; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VastModel {
    pub config: ModelConfig,
    pub split: ExpressionSplit,
    pub encoder: StyleEncoder,
    pub enhancer: VariationalEnhancer,
    pub ar: ArDecoder,
    pub nar: NarDecoder,
}

impl VastModel {
    pub fn init<T: Scalar>(config: ModelConfig, split: ExpressionSplit, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if split.dims() != config.expr_dim {
            return Err(Error::Config(format!(
                "split covers {} dims, model expects {}",
                split.dims(),
                config.expr_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = StyleEncoder::new(&mut store, &config, &mut rng);
        let enhancer = VariationalEnhancer::new(&mut store, &config, &mut rng);
        let ar = ArDecoder::new(&mut store, &config, split.weak_ids.len(), &mut rng);
        let nar = NarDecoder::new(&mut store, &config, split.strong_ids.len(), &mut rng);
        Ok((Self { config, split, encoder, enhancer, ar, nar }, store))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.expr.ncols() != self.config.expr_dim || batch.ppg.ncols() != self.config.ppg_dim {
            return Err(Error::Shape(format!(
                "batch widths {}/{} vs model {}/{}",
                batch.expr.ncols(),
                batch.ppg.ncols(),
                self.config.expr_dim,
                self.config.ppg_dim
            )));
        }
        if batch.expr.iter().chain(batch.ppg.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch input".into()));
        }
        Ok(())
    }

    fn check_noise(&self, batch: &Batch, noise: &ForwardNoise) -> Result<()> {
        if noise.eps.dim() != (batch.size(), self.config.latent_dim) {
            return Err(Error::Shape(format!("eps {:?} for a batch of {}", noise.eps.dim(), batch.size())));
        }
        if noise.frame_noise.len() != batch.size()
            || noise.frame_noise.iter().zip(&batch.lengths).any(|(u, &n)| u.len() < n)
        {
            return Err(Error::Shape("frame noise does not cover the batch".into()));
        }
        Ok(())
    }

    /// Batch PPG after frame dropout (padding rows stay zero).
    pub fn dropped_ppg(&self, batch: &Batch, noise: &ForwardNoise) -> Result<Array2<f64>> {
        let mut u = vec![1.0; batch.size() * batch.max_len];
        for (b, draws) in noise.frame_noise.iter().enumerate() {
            for t in 0..batch.lengths[b] {
                u[batch.row(b, t)] = draws[t];
            }
        }
        ppg_dropout(&batch.ppg, noise.dropout, &u)
    }

    /// Weak columns of the batch expression, used as the teacher signal.
    pub fn weak_target(&self, batch: &Batch) -> Array2<f64> {
        batch.expr.select(Axis(1), &self.split.weak_ids)
    }

    pub fn strong_target(&self, batch: &Batch) -> Array2<f64> {
        batch.expr.select(Axis(1), &self.split.strong_ids)
    }

    /// Encoder, enhancer and both decoder branches. With `teacher_forcing` the
    /// AR branch consumes ground-truth previous frames.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        noise: &ForwardNoise,
        teacher_forcing: bool,
    ) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        self.check_noise(batch, noise)?;
        let feature = self.encoder.forward(g, store, batch);
        let eps = g.constant(noise.eps.mapv(|v| T::from_f64(v).unwrap()));
        let latent = self.enhancer.forward(g, store, feature, eps);
        let dropped = self.dropped_ppg(batch, noise)?;
        let teacher = teacher_forcing.then(|| self.weak_target(batch));
        let weak = self.ar.forward(g, store, batch, &dropped, latent.zk, teacher.as_ref());
        let strong = self.nar.forward(g, store, batch, latent.zk);
        Ok(ForwardVars { feature, latent, weak, strong })
    }

    /// Masked asymmetric reconstruction plus `beta` times the batch-mean KL estimate.
    ///
    /// Each sequence's reconstruction is the mean over its own `N_b * D`
    /// elements; sequences are then averaged, so padding never contributes.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        noise: &ForwardNoise,
        beta: f64,
        lambda: f64,
        teacher_forcing: bool,
    ) -> Result<(ForwardVars, LossVars)> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidArgument(format!("lambda = {lambda} outside (0, 1)")));
        }
        let fwd = self.forward(g, store, batch, noise, teacher_forcing)?;
        let weak = masked_recon(g, fwd.weak, &self.weak_target(batch), batch, self.config.expr_dim, lambda);
        let strong = masked_recon(g, fwd.strong, &self.strong_target(batch), batch, self.config.expr_dim, lambda);
        let recon = g.add(weak, strong);
        let kl_rows = enhancer::kl_estimate_var(g, &fwd.latent);
        let kl_sum = g.sum(kl_rows);
        let kl = g.scale(kl_sum, T::from_f64(1.0 / batch.size() as f64).unwrap());
        let weighted = g.scale(kl, T::from_f64(beta).unwrap());
        let total = g.add(recon, weighted);
        Ok((fwd, LossVars { total, recon, kl }))
    }

    /// Style feature `h` for each sequence of the batch.
    pub fn encode_style<T: Scalar>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let h = self.encoder.forward(&mut g, store, batch);
        Ok(to_f64(g.value(h)))
    }

    /// Flow output `z_K` for the posterior mean (or for explicit noise).
    pub fn style_embedding<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        batch: &Batch,
        eps: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let h = self.encoder.forward(&mut g, store, batch);
        let e = match eps {
            Some(e) if e.dim() == (batch.size(), self.config.latent_dim) => e.clone(),
            Some(e) => return Err(Error::Shape(format!("eps {:?}", e.dim()))),
            None => Array2::zeros((batch.size(), self.config.latent_dim)),
        };
        let e = g.constant(e.mapv(|v| T::from_f64(v).unwrap()));
        let lat = self.enhancer.forward(&mut g, store, h, e);
        Ok(to_f64(g.value(lat.zk)))
    }

    /// Posterior mean `mu` per sequence (the embedding of a flow-free model).
    pub fn posterior_mean<T: Scalar>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let h = self.encoder.forward(&mut g, store, batch);
        let (mu, _, _) = self.enhancer.posterior(&mut g, store, h);
        Ok(to_f64(g.value(mu)))
    }

    /// AR branch for one sequence: `ppg` is `N x P`, `s` the style vector,
    /// `frame_noise` the dropout draws (length `N`).
    pub fn ar_decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ppg: &Array2<f64>,
        s: &[f64],
        teacher: Option<&Array2<f64>>,
        dropout: f64,
        frame_noise: &[f64],
    ) -> Result<Array2<f64>> {
        let n = ppg.nrows();
        let wd = self.split.weak_ids.len();
        if let Some(x) = teacher {
            if x.dim() != (n, wd) {
                return Err(Error::Shape(format!("teacher {:?}, expected ({n}, {wd})", x.dim())));
            }
        }
        let batch = self.single(ppg, s)?;
        let dropped = ppg_dropout(ppg, dropout, frame_noise)?;
        let mut g = Graph::new();
        let sv = g.constant(Array2::from_shape_fn((1, s.len()), |(_, j)| T::from_f64(s[j]).unwrap()));
        let out = self.ar.forward(&mut g, store, &batch, &dropped, sv, teacher);
        Ok(to_f64(g.value(out)))
    }

    /// NAR branch for one sequence.
    pub fn nar_decode<T: Scalar>(&self, store: &ParamStore<T>, ppg: &Array2<f64>, s: &[f64]) -> Result<Array2<f64>> {
        let batch = self.single(ppg, s)?;
        let mut g = Graph::new();
        let sv = g.constant(Array2::from_shape_fn((1, s.len()), |(_, j)| T::from_f64(s[j]).unwrap()));
        let out = self.nar.forward(&mut g, store, &batch, sv);
        Ok(to_f64(g.value(out)))
    }

    fn single(&self, ppg: &Array2<f64>, s: &[f64]) -> Result<Batch> {
        if ppg.ncols() != self.config.ppg_dim || ppg.nrows() == 0 {
            return Err(Error::Shape(format!("PPG {:?}, expected N x {}", ppg.dim(), self.config.ppg_dim)));
        }
        if s.len() != self.config.latent_dim {
            return Err(Error::Shape(format!("style vector of length {}", s.len())));
        }
        if ppg.iter().chain(s).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder input".into()));
        }
        let expr = Array2::zeros((ppg.nrows(), self.config.expr_dim));
        Batch::new(&[(&expr, ppg)])
    }

    /// Full inference for one prompt: posterior mean (or `eps`), free-running,
    /// no dropout, reassembled to `N x expr_dim`.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prompt_expr: &Array2<f64>,
        prompt_ppg: &Array2<f64>,
        ppg: &Array2<f64>,
        eps: Option<&[f64]>,
    ) -> Result<Array2<f64>> {
        let prompt = Batch::new(&[(prompt_expr, prompt_ppg)])?;
        let eps = eps
            .map(|e| Array2::from_shape_vec((1, e.len()), e.to_vec()))
            .transpose()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let s = self.style_embedding(store, &prompt, eps.as_ref())?;
        let s = s.row(0).to_vec();
        let n = ppg.nrows();
        let weak = self.ar_decode(store, ppg, &s, None, 0.0, &vec![1.0; n])?;
        let strong = self.nar_decode(store, ppg, &s)?;
        assemble_expression(&weak, &strong, &self.split)
    }

    /// Writes every parameter under its name, as f32.
    pub fn params_to_archive<T: Scalar>(&self, store: &ParamStore<T>, archive: &mut NamedTensorArchive) -> Result<()> {
        for id in store.ids() {
            let m = store.value(id).mapv(|v| v.to_f32().unwrap());
            archive.push_f32_matrix(store.name(id), &m)?;
        }
        Ok(())
    }

    /// Overwrites `store` from an archive written by [`Self::params_to_archive`].
    pub fn params_from_archive<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        archive: &NamedTensorArchive,
    ) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let m = archive.f32_matrix(&name)?;
            if m.dim() != store.value(id).dim() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, model {:?}",
                    m.dim(),
                    store.value(id).dim()
                )));
            }
            *store.value_mut(id) = m.mapv(|v| T::from_f32(v).unwrap());
        }
        Ok(())
    }
}

fn to_f64<T: Scalar>(a: &Array2<T>) -> Array2<f64> {
    a.mapv(|v| v.to_f64().unwrap())
}

/// `sum_b sum_{t < N_b} sum_j w(e) e^2 / (B N_b D)` for one branch, where `D`
/// is the full expression width so the two branches add to a per-element mean.
fn masked_recon<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Array2<f64>,
    batch: &Batch,
    full_dim: usize,
    lambda: f64,
) -> Var {
    let p = to_f64(g.value(pred));
    let bsz = batch.size() as f64;
    let mut w = Array2::<f64>::zeros(p.raw_dim());
    for (b, &n) in batch.lengths.iter().enumerate() {
        let norm = 1.0 / (bsz * n as f64 * full_dim as f64);
        for t in 0..n {
            let r = batch.row(b, t);
            for j in 0..p.ncols() {
                w[[r, j]] = norm * asymmetric_weight(p[[r, j]] - target[[r, j]], target[[r, j]], lambda);
            }
        }
    }
    let tgt = g.constant(target.mapv(|v| T::from_f64(v).unwrap()));
    let e = g.sub(pred, tgt);
    let e2 = g.mul(e, e);
    let wv = g.constant(w.mapv(|v| T::from_f64(v).unwrap()));
    let we = g.mul(e2, wv);
    g.sum(we)
}

/// Splits batch-layout rows back into one unpadded matrix per sequence.
pub fn per_sequence_rows(values: &Array2<f64>, batch: &Batch) -> Vec<Array2<f64>> {
    (0..batch.size())
        .map(|b| {
            let r = batch.row(b, 0);
            values.slice(ndarray::s![r..r + batch.lengths[b], ..]).to_owned()
        })
        .collect()
}
