//! TOML run configuration.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dynconv_core::budget::{Criterion, SparsityConfig};
use dynconv_core::gating::{MaskUnitKind, TemperatureSchedule};
use dynconv_core::model::ModelSpec;
use dynconv_core::sparse::{GatedBlockSpec, ResidualActivation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionName {
    Net,
    PerLayer,
    NetBounds,
}

impl From<CriterionName> for Criterion {
    fn from(c: CriterionName) -> Self {
        match c {
            CriterionName::Net => Criterion::Net,
            CriterionName::PerLayer => Criterion::PerLayer,
            CriterionName::NetBounds => Criterion::NetBounds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskUnitName {
    Conv1x1,
    Squeeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualName {
    Identity,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub channels: usize,
    pub expansion_channels: usize,
    pub out_channels: usize,
    pub gated: bool,
    pub mask_unit: MaskUnitName,
    pub residual: ResidualName,
}

impl BlockConfig {
    pub fn inverted_residual(channels: usize, expansion_channels: usize) -> Self {
        BlockConfig {
            channels,
            expansion_channels,
            out_channels: channels,
            gated: true,
            mask_unit: MaskUnitName::Squeeze,
            residual: ResidualName::Identity,
        }
    }

    pub fn spec(&self) -> GatedBlockSpec {
        GatedBlockSpec {
            channels: self.channels,
            expansion_channels: self.expansion_channels,
            out_channels: self.out_channels,
            mask_unit: match self.mask_unit {
                MaskUnitName::Conv1x1 => MaskUnitKind::Conv1x1,
                MaskUnitName::Squeeze => MaskUnitKind::Squeeze,
            },
            gated: self.gated,
            residual: match self.residual {
                ResidualName::Identity => ResidualActivation::Identity,
                ResidualName::Relu => ResidualActivation::Relu,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem_channels: usize,
    pub stem_pool: bool,
    pub classes: usize,
    pub blocks: Vec<BlockConfig>,
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            stem_channels: self.stem_channels,
            stem_pool: self.stem_pool,
            blocks: self.blocks.iter().map(BlockConfig::spec).collect(),
            classes: self.classes,
        }
    }
}

/// Linear decay of the gate temperature from `start` to `temperature`
/// between two epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureAnneal {
    pub start: f32,
    pub start_epoch: usize,
    pub end_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerName,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by 0.1.
    pub lr_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub theta: f64,
    pub alpha: f64,
    pub criterion: CriterionName,
    pub seed: u64,
    /// Last fraction of epochs trained without Gumbel noise.
    pub noise_off_fraction: f64,
    pub temperature: f32,
    pub train_size: usize,
    pub val_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_anneal: Option<TemperatureAnneal>,
    /// Overrides the initial bias of every mask unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_bias_init: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub channels: usize,
    pub expansion_channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub densities: Vec<f64>,
    pub warmup: usize,
    pub repeats: usize,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            channels: 16,
            expansion_channels: 96,
            height: 32,
            width: 32,
            batch: 8,
            densities: vec![1.0, 0.5, 0.25, 0.125],
            warmup: 3,
            repeats: 5,
            runs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl Default for Config {
    /// Four gated blocks, `C = 16`, `C_e = 96`, on 32x32 glyph canvases.
    fn default() -> Self {
        Config {
            model: ModelConfig {
                in_channels: 1,
                height: 32,
                width: 32,
                stem_channels: 16,
                stem_pool: true,
                classes: crate::data::GLYPH_COUNT,
                blocks: (0..4).map(|_| BlockConfig::inverted_residual(16, 96)).collect(),
            },
            train: TrainConfig {
                optimizer: OptimizerName::Adam,
                lr: 2e-4,
                lr_milestones: vec![],
                weight_decay: 1e-5,
                momentum: 0.9,
                epochs: 60,
                batch_size: 32,
                theta: 0.25,
                alpha: 10.0,
                criterion: CriterionName::NetBounds,
                seed: 0,
                noise_off_fraction: 0.2,
                temperature: 1.0,
                train_size: 2048,
                val_size: 512,
                temperature_anneal: None,
                gate_bias_init: None,
            },
            bench: BenchConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn temperature(&self) -> TemperatureSchedule {
        let t = &self.train;
        match t.temperature_anneal {
            Some(a) => TemperatureSchedule {
                start: a.start,
                end: t.temperature,
                start_epoch: a.start_epoch,
                end_epoch: a.end_epoch,
            },
            None => TemperatureSchedule::constant(t.temperature),
        }
    }

    pub fn sparsity(&self) -> Result<SparsityConfig> {
        let t = &self.train;
        Ok(SparsityConfig::new(t.theta, t.alpha, t.epochs, t.criterion.into())?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.spec().validate()?;
        self.sparsity()?;
        let t = &self.train;
        if !(t.lr > 0.0) {
            bail!("learning rate must be positive");
        }
        if t.batch_size == 0 || t.train_size == 0 {
            bail!("batch size and training set size must be positive");
        }
        if !(0.0..=1.0).contains(&t.noise_off_fraction) {
            bail!("noise_off_fraction must lie in [0, 1]");
        }
        if !(t.temperature > 0.0) || t.temperature_anneal.is_some_and(|a| !(a.start > 0.0)) {
            bail!("temperature must be positive");
        }
        let b = &self.bench;
        if b.runs == 0 || b.repeats == 0 || b.batch == 0 {
            bail!("bench runs, repeats and batch must be positive");
        }
        if b.densities.iter().any(|d| !(0.0..=1.0).contains(d)) {
            bail!("bench densities must lie in [0, 1]");
        }
        Ok(())
    }
}
