use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    /// Loss log (CSV); omitted disables logging.
    pub log: Option<PathBuf>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Fraction of `steps` over which the KL weight ramps up linearly.
    pub beta_anneal_fraction: f64,
    /// KL weight reached at the end of the ramp.
    pub beta_max: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub clip_norm: f64,
    pub val_every: usize,
    /// Zero disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    /// Cap on validation sequences scored per evaluation; zero means all.
    pub val_limit: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: PathBuf::from("data/corpus"),
            checkpoint: PathBuf::from("runs/model.vten"),
            log: None,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 20_000,
            beta_anneal_fraction: 0.2,
            beta_max: 1.0,
            dropout: 0.2,
            lambda: 0.7,
            clip_norm: 5.0,
            val_every: 500,
            checkpoint_every: 2000,
            val_limit: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a nonnegative number");
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return bad("batch_size and val_every must be positive");
        }
        if !(self.beta_anneal_fraction > 0.0 && self.beta_anneal_fraction <= 1.0) {
            return bad("beta_anneal_fraction must be in (0, 1]");
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return bad("beta_max must be a nonnegative number");
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad("lambda must be in (0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// KL weight at `step`: linear from 0 to `beta_max` over the ramp, then flat.
    pub fn beta(&self, step: usize) -> f64 {
        let ramp = self.beta_anneal_fraction * self.steps as f64;
        if ramp <= 0.0 {
            return self.beta_max;
        }
        self.beta_max * (step as f64 / ramp).min(1.0)
    }
}
