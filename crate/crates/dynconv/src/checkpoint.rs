//! JSON model checkpoints.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dynconv_core::layers::BatchNormParams;
use dynconv_core::model::Model;

use crate::config::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Model layout, trainable tensors in [`Model::params`] order and batch-norm
/// running statistics (stem first, then three per block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Vec<Vec<f32>>,
    pub running: Vec<RunningStats>,
}

fn batch_norms(m: &Model) -> Vec<&BatchNormParams> {
    let mut out = vec![&m.stem_bn];
    for b in &m.blocks {
        out.extend([&b.bn1, &b.bn2, &b.bn3]);
    }
    out
}

fn batch_norms_mut(m: &mut Model) -> Vec<&mut BatchNormParams> {
    let mut out = vec![&mut m.stem_bn];
    for b in &mut m.blocks {
        out.extend(b.bn_mut());
    }
    out
}

impl Checkpoint {
    pub fn from_model(config: &ModelConfig, m: &Model) -> Self {
        Checkpoint {
            model: config.clone(),
            params: m.params().iter().map(|t| t.data().to_vec()).collect(),
            running: batch_norms(m)
                .into_iter()
                .map(|bn| RunningStats {
                    mean: bn.running_mean.clone(),
                    var: bn.running_var.clone(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::init(self.model.spec(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut params = m.params_mut();
        if params.len() != self.params.len() {
            bail!("checkpoint has {} tensors, model expects {}", self.params.len(), params.len());
        }
        for (i, (p, v)) in params.iter_mut().zip(&self.params).enumerate() {
            if p.len() != v.len() {
                bail!("tensor {i}: checkpoint has {} values, model expects {}", v.len(), p.len());
            }
            p.data_mut().copy_from_slice(v);
        }
        let mut bns = batch_norms_mut(&mut m);
        if bns.len() != self.running.len() {
            bail!("checkpoint has {} batch-norm layers, model expects {}", self.running.len(), bns.len());
        }
        for (bn, r) in bns.iter_mut().zip(&self.running) {
            if r.mean.len() != bn.channels() || r.var.len() != bn.channels() {
                bail!("batch-norm statistics have the wrong channel count");
            }
            bn.running_mean.clone_from(&r.mean);
            bn.running_var.clone_from(&r.var);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
