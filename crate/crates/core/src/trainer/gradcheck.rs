use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardNoise, VastModel};
use crate::synth::{gen_indexed, CorpusConfig, CorpusConstants};

pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_STEP: f64 = 1e-3;

/// One compared coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Loss (and, when asked, the gradient of every parameter) at the store's current values.
pub trait Objective {
    fn eval(&mut self, store: &ParamStore<f64>, with_grad: bool) -> Result<(f64, Option<Vec<Array2<f64>>>)>;
}

impl<F> Objective for F
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, Option<Vec<Array2<f64>>>)>,
{
    fn eval(&mut self, store: &ParamStore<f64>, with_grad: bool) -> Result<(f64, Option<Vec<Array2<f64>>>)> {
        self(store, with_grad)
    }
}

/// Compares analytic gradients with central differences on `probes` randomly
/// chosen scalars. Parameters are grouped by name prefix (text before the
/// first `.`) and groups are visited round-robin so every module is probed.
pub fn grad_check_objective(
    store: &mut ParamStore<f64>,
    objective: &mut impl Objective,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if store.is_empty() || probes == 0 {
        return Err(Error::InvalidArgument("nothing to check".into()));
    }
    let (_, grads) = objective.eval(store, true)?;
    let grads = grads.ok_or_else(|| Error::InvalidArgument("objective returned no gradient".into()))?;

    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, name) in store.names().iter().enumerate() {
        let prefix = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(p, _)| *p == prefix) {
            Some((_, ids)) => ids.push(i),
            None => groups.push((prefix, vec![i])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(probes);
    for k in 0..probes {
        let (_, members) = &groups[k % groups.len()];
        let id = ids[*members.choose(&mut rng).expect("non-empty group")];
        let (r, c) = store.value(id).dim();
        let index = (rng.random_range(0..r), rng.random_range(0..c));
        let orig = store.value(id)[index];
        store.value_mut(id)[index] = orig + step;
        let (plus, _) = objective.eval(store, false)?;
        store.value_mut(id)[index] = orig - step;
        let (minus, _) = objective.eval(store, false)?;
        store.value_mut(id)[index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[id.index()][index];
        out.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = out.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, probes: out })
}

/// The training loss of `model` on a fixed batch and noise, as an [`Objective`].
pub struct ModelObjective<'a> {
    pub model: &'a VastModel,
    pub batch: &'a Batch,
    pub noise: &'a ForwardNoise,
    pub beta: f64,
    pub lambda: f64,
}

impl Objective for ModelObjective<'_> {
    fn eval(&mut self, store: &ParamStore<f64>, with_grad: bool) -> Result<(f64, Option<Vec<Array2<f64>>>)> {
        let mut g = Graph::new();
        let (_, l) = self.model.loss(&mut g, store, self.batch, self.noise, self.beta, self.lambda, true)?;
        let loss = g.scalar(l.total);
        let grads = with_grad.then(|| g.backward(l.total).param_grads(store));
        Ok((loss, grads))
    }
}

/// A two-sequence synthetic micro-batch (8-12 frames) with fixed noise,
/// sized for `model`, for probing gradients without a corpus on disk.
pub fn probe_inputs(model: &VastModel, seed: u64) -> Result<(Batch, ForwardNoise)> {
    let cfg = CorpusConfig {
        seed,
        sequences: 2,
        min_len: 8,
        max_len: 12,
        ppg_dim: model.config.ppg_dim,
        ..Default::default()
    };
    let constants = CorpusConstants::generate(seed, model.split.strong_ids.len(), cfg.ppg_dim);
    let seqs = (0..2).map(|i| gen_indexed(&cfg, i, &constants, &model.split)).collect::<Result<Vec<_>>>()?;
    let data =
        seqs.iter().map(|s| Ok((s.expression.frames().clone(), s.aligned_ppg()?))).collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = data.iter().map(|(x, a)| (x, a)).collect();
    let batch = Batch::new(&items)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Array2::from_shape_simple_fn((2, model.config.latent_dim), || rng.sample(StandardNormal));
    let frame_noise = batch.lengths.iter().map(|&n| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
    Ok((batch, ForwardNoise { eps, dropout: 0.2, frame_noise }))
}

/// Gradient check of the full training loss with default probe count and step.
pub fn grad_check(
    model: &VastModel,
    store: &mut ParamStore<f64>,
    batch: &Batch,
    noise: &ForwardNoise,
    beta: f64,
    lambda: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut obj = ModelObjective { model, batch, noise, beta, lambda };
    grad_check_objective(store, &mut obj, DEFAULT_PROBES, DEFAULT_STEP, seed)
}
