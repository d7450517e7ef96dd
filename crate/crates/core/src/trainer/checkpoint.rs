use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::face::ExpressionSplit;
use crate::model::VastModel;
use crate::store::{NamedTensorArchive, Tensor, TensorData};

const SPLIT_PREFIX: &str = "split.";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Sidecar text stored next to the tensor archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Fingerprint of the corpus constants the model was trained against.
    pub fingerprint: String,
    pub step: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub train: TrainConfig,
}

/// Trained (or initial) model state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: VastModel,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

/// `model.vten` -> `model.toml`
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<NamedTensorArchive> {
        let mut a = NamedTensorArchive::new();
        self.model.params_to_archive(&self.params, &mut a)?;
        self.model.split.write_into(SPLIT_PREFIX, &mut a)?;
        if let Some(opt) = &self.optimizer {
            for (id, (m, v)) in self.params.ids().zip(opt.m.iter().zip(&opt.v)) {
                let name = self.params.name(id);
                a.push_f32_matrix(&format!("{M_PREFIX}{name}"), m)?;
                a.push_f32_matrix(&format!("{V_PREFIX}{name}"), v)?;
            }
            a.push("optim.t", vec![1], TensorData::I64(vec![opt.t as i64]))?;
        }
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        self.to_archive()?.save(path)?;
        let text = toml::to_string(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(sidecar_path(path))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        meta.train.validate()?;
        let archive = NamedTensorArchive::load(path)?;
        Self::from_parts(meta, &archive)
    }

    pub fn from_parts(meta: CheckpointMeta, archive: &NamedTensorArchive) -> Result<Self> {
        let split = ExpressionSplit::read_from(SPLIT_PREFIX, archive)?;
        let (model, mut params) = VastModel::init::<f32>(meta.train.model.clone(), split, 0)?;
        model.params_from_archive(&mut params, archive)?;
        let optimizer = match archive.get("optim.t") {
            None => None,
            Some(Tensor { data: TensorData::I64(t), .. }) if t.len() == 1 && t[0] >= 0 => {
                let mut opt = Adam::new(&params);
                opt.t = t[0] as u64;
                for (i, id) in params.ids().enumerate() {
                    let name = params.name(id);
                    opt.m[i] = archive.f32_matrix(&format!("{M_PREFIX}{name}"))?;
                    opt.v[i] = archive.f32_matrix(&format!("{V_PREFIX}{name}"))?;
                    if opt.m[i].dim() != params.value(id).dim() || opt.v[i].dim() != params.value(id).dim() {
                        return Err(Error::Shape(format!("optimizer state for {name}")));
                    }
                }
                Some(opt)
            }
            Some(_) => return Err(Error::Shape("optim.t must be one nonnegative i64".into())),
        };
        Ok(Self { meta, model, params, optimizer })
    }

    /// Errors unless the checkpoint was trained against constants with `fingerprint`.
    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.meta.fingerprint != fingerprint {
            return Err(Error::CorpusMismatch(format!(
                "checkpoint trained on {}, corpus is {fingerprint}",
                self.meta.fingerprint
            )));
        }
        Ok(())
    }
}
