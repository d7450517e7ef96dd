//! Optimization of the full model: batching, KL annealing, Adam with global
//! norm clipping, validation, loss logging and resumable checkpoints.
//!
//! Every random draw of step `k` (batch membership, reparameterization noise,
//! dropout noise) comes from a stream derived from `(seed, k)`, so a run
//! resumed from a checkpoint repeats the uninterrupted run exactly.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub use adam::{clip_global_norm, global_norm, Adam};
pub use checkpoint::{sidecar_path, Checkpoint, CheckpointMeta};
pub use config::TrainConfig;
pub use gradcheck::{
    grad_check, grad_check_objective, probe_inputs, relative_error, GradCheckReport, ModelObjective, Objective, Probe,
    DEFAULT_PROBES, DEFAULT_STEP,
};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardNoise, VastModel};
use crate::synth::{Corpus, SplitTag};

/// Salt separating the batch streams from the initialization stream.
const BATCH_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Sequences held in memory with their PPG aligned to the expression rate.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub expr: Vec<Array2<f64>>,
    pub ppg: Vec<Array2<f64>>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, tag: SplitTag, limit: usize) -> Result<Self> {
        let mut ids = corpus.indices(tag);
        if limit > 0 {
            ids.truncate(limit);
        }
        let mut out = Self::default();
        for i in ids {
            let seq = corpus.load(i)?;
            out.ppg.push(seq.aligned_ppg()?);
            out.expr.push(seq.expression.into_frames());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.expr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expr.is_empty()
    }

    pub fn batch(&self, ids: &[usize]) -> Result<Batch> {
        let items: Vec<_> = ids.iter().map(|&i| (&self.expr[i], &self.ppg[i])).collect();
        Batch::new(&items)
    }
}

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
    pub grad_norm: f64,
}

#[derive(Serialize)]
struct LogRow {
    step: usize,
    recon: f64,
    kl: f64,
    beta: f64,
    val_recon: Option<f64>,
}

/// Batch indices and noise for step `step`.
pub fn step_inputs(
    seed: u64,
    step: usize,
    train: &Dataset,
    batch_size: usize,
    latent_dim: usize,
    dropout: f64,
) -> Result<(Batch, ForwardNoise)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_SALT);
    rng.set_stream(step as u64);
    let bsz = batch_size.min(train.len());
    let mut ids = sample(&mut rng, train.len(), bsz).into_vec();
    ids.sort_unstable();
    let batch = train.batch(&ids)?;
    let eps = Array2::from_shape_simple_fn((bsz, latent_dim), || rng.sample(StandardNormal));
    let frame_noise = batch.lengths.iter().map(|&n| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
    Ok((batch, ForwardNoise { eps, dropout, frame_noise }))
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub fingerprint: String,
    pub model: VastModel,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let (model, params) = VastModel::init::<f32>(config.model.clone(), corpus.split.clone(), config.seed)?;
        let optimizer = Adam::new(&params);
        Ok(Self { config, fingerprint: corpus.fingerprint.clone(), model, params, optimizer, step: 0 })
    }

    /// Continues from a checkpoint; `config` may extend the step count.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.meta.train.model != config.model {
            return Err(Error::Config("model dimensions differ from the checkpoint".into()));
        }
        let optimizer = ckpt.optimizer.clone().unwrap_or_else(|| Adam::new(&ckpt.params));
        Ok(Self {
            config,
            fingerprint: ckpt.meta.fingerprint,
            model: ckpt.model,
            params: ckpt.params,
            optimizer,
            step: ckpt.meta.step,
        })
    }

    /// One update on `batch`. Fails without touching the parameters if the
    /// loss or its gradient is not finite.
    pub fn train_step(&mut self, batch: &Batch, noise: &ForwardNoise) -> Result<LossRecord> {
        let beta = self.config.beta(self.step);
        let mut g = Graph::new();
        let (_, l) = self.model.loss(&mut g, &self.params, batch, noise, beta, self.config.lambda, true)?;
        let recon = g.scalar(l.recon) as f64;
        let kl = g.scalar(l.kl) as f64;
        for (term, v) in [("reconstruction term", recon), ("KL term", kl)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{term} at step {}", self.step)));
            }
        }
        let mut grads = g.backward(l.total).param_grads(&self.params);
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
        }
        self.optimizer.step(&mut self.params, &grads, self.config.learning_rate);
        let rec = LossRecord { step: self.step, recon, kl, beta, grad_norm };
        self.step += 1;
        Ok(rec)
    }

    /// Runs until `config.steps`, validating every `val_every` steps and at the end.
    pub fn run(&mut self, train: &Dataset, val: &Dataset) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        let mut log = match &self.config.log {
            Some(path) => Some(open_log(path)?),
            None => None,
        };
        while self.step < self.config.steps {
            let (batch, noise) = step_inputs(
                self.config.seed,
                self.step,
                train,
                self.config.batch_size,
                self.config.model.latent_dim,
                self.config.dropout,
            )?;
            let rec = self.train_step(&batch, &noise)?;
            let done = self.step;
            let val_recon = if !val.is_empty()
                && (done.is_multiple_of(self.config.val_every) || done == self.config.steps)
            {
                let v = validation_recon(&self.model, &self.params, val, self.config.batch_size, self.config.lambda)?;
                history.validation.push((done, v));
                Some(v)
            } else {
                None
            };
            if let Some(w) = log.as_mut() {
                w.serialize(LogRow { step: done, recon: rec.recon, kl: rec.kl, beta: rec.beta, val_recon })
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                w.flush()?;
            }
            history.losses.push(rec);
            if self.config.checkpoint_every > 0
                && done.is_multiple_of(self.config.checkpoint_every)
                && done < self.config.steps
            {
                self.checkpoint(BTreeMap::new()).save(&self.config.checkpoint)?;
            }
        }
        Ok(history)
    }

    pub fn checkpoint(&self, metrics: BTreeMap<String, f64>) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                fingerprint: self.fingerprint.clone(),
                step: self.step,
                metrics,
                train: self.config.clone(),
            },
            model: self.model.clone(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

fn open_log(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}

/// Losses and validation scores of a run.
#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub losses: Vec<LossRecord>,
    /// `(steps completed, validation reconstruction)`
    pub validation: Vec<(usize, f64)>,
}

impl TrainHistory {
    /// Mean reconstruction over the `window` records ending at `step` (inclusive).
    pub fn smoothed_recon(&self, step: usize, window: usize) -> Option<f64> {
        let end = self.losses.iter().position(|r| r.step == step)? + 1;
        let start = end.saturating_sub(window);
        let w = &self.losses[start..end];
        Some(w.iter().map(|r| r.recon).sum::<f64>() / w.len() as f64)
    }

    pub fn validation_at(&self, step: usize) -> Option<f64> {
        self.validation.iter().find(|(s, _)| *s == step).map(|(_, v)| *v)
    }
}

/// Mean per-sequence asymmetric reconstruction on `data` with the posterior
/// mean, no dropout and teacher forcing (the training objective's recon term).
pub fn validation_recon(
    model: &VastModel,
    params: &ParamStore<f32>,
    data: &Dataset,
    batch_size: usize,
    lambda: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let noise = ForwardNoise::deterministic(&batch, model.config.latent_dim);
        let mut g = Graph::new();
        let (_, l) = model.loss(&mut g, params, &batch, &noise, 0.0, lambda, true)?;
        // the recon term is a batch mean; weight by batch size
        total += g.scalar(l.recon) as f64 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Trains from scratch (or resumes when `resume` is given) and writes the final checkpoint.
pub fn fit(config: &TrainConfig, resume: Option<Checkpoint>) -> Result<FitOutcome> {
    config.validate()?;
    let corpus = Corpus::open(&config.corpus)?;
    let train = Dataset::from_corpus(&corpus, SplitTag::Train, 0)?;
    let val = Dataset::from_corpus(&corpus, SplitTag::Val, config.val_limit)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            ckpt.check_fingerprint(&corpus.fingerprint)?;
            Trainer::resume(ckpt, config.clone())?
        }
        None => Trainer::new(config.clone(), &corpus)?,
    };
    let history = trainer.run(&train, &val)?;
    let mut metrics = BTreeMap::new();
    if let Some(r) = history.losses.last() {
        metrics.insert("final_recon".to_string(), r.recon);
        metrics.insert("final_kl".to_string(), r.kl);
    }
    if let Some(&(_, v)) = history.validation.last() {
        metrics.insert("final_val_recon".to_string(), v);
    }
    let checkpoint = trainer.checkpoint(metrics);
    checkpoint.save(&config.checkpoint)?;
    Ok(FitOutcome { checkpoint, history })
}
