use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network dimensions. Defaults follow the reference architecture; tests and
/// quick experiments shrink them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub expr_dim: usize,
    pub ppg_dim: usize,
    pub enc_channels: usize,
    pub enc_stages: usize,
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub enc_hidden: usize,
    pub style_dim: usize,
    pub latent_dim: usize,
    pub flow_steps: usize,
    pub ar_hidden: usize,
    pub nar_dim: usize,
    pub nar_heads: usize,
    pub nar_ff: usize,
    pub nar_blocks: usize,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            expr_dim: 233,
            ppg_dim: 40,
            enc_channels: 128,
            enc_stages: 3,
            enc_kernel: 5,
            enc_stride: 2,
            enc_hidden: 128,
            style_dim: 128,
            latent_dim: 16,
            flow_steps: 4,
            ar_hidden: 256,
            nar_dim: 128,
            nar_heads: 4,
            nar_ff: 512,
            nar_blocks: 4,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("expr_dim", self.expr_dim),
            ("ppg_dim", self.ppg_dim),
            ("enc_channels", self.enc_channels),
            ("enc_kernel", self.enc_kernel),
            ("enc_stride", self.enc_stride),
            ("enc_hidden", self.enc_hidden),
            ("style_dim", self.style_dim),
            ("latent_dim", self.latent_dim),
            ("ar_hidden", self.ar_hidden),
            ("nar_dim", self.nar_dim),
            ("nar_heads", self.nar_heads),
            ("nar_ff", self.nar_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.nar_dim.is_multiple_of(self.nar_heads) {
            return Err(Error::Config(format!(
                "nar_heads = {} does not divide nar_dim = {}",
                self.nar_heads, self.nar_dim
            )));
        }
        Ok(())
    }
}
