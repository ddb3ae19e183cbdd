//! Training loop on the glyph task.

use std::time::Instant;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynconv_core::autodiff::{Optimizer, OptimizerKind, Tape};
use dynconv_core::budget::anneal_p;
use dynconv_core::gating::{noise_off_epoch, GumbelConfig};
use dynconv_core::model::{MaskPolicy, Model};
use dynconv_core::sparse::BlockMode;

use crate::config::{Config, OptimizerName};
use crate::data::GlyphDataset;

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Annealing factor of the budget bounds.
    pub p: f64,
    pub noise: bool,
    /// Gate temperature.
    pub temperature: f32,
    /// Batch means of the loss terms.
    pub task_loss: f64,
    pub sp_net: f64,
    pub sp_low: f64,
    pub sp_up: f64,
    pub total_loss: f64,
    /// Mean executed fraction of each gated block over the training batches.
    pub fractions: Vec<f64>,
    pub net_fraction: f64,
    /// Fractions at the end of the epoch: the epoch's gate (noise included)
    /// on the validation images, inference batch norm.
    pub end_fractions: Vec<f64>,
    pub val_accuracy: f64,
    /// Executed fractions on the validation set, noise off, sparse inference.
    pub val_fractions: Vec<f64>,
    pub val_net_fraction: f64,
    pub seconds: f64,
}

/// Validation-set summary of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub fractions: Vec<f64>,
    pub net_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub val: GlyphDataset,
}

/// Learning rate after the step decays that precede `epoch`.
pub fn lr_at(cfg: &Config, epoch: usize) -> f64 {
    let drops = cfg.train.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.train.lr * 0.1f64.powi(drops as i32)
}

/// Sparse inference over a dataset with noise-free gates.
pub fn evaluate(model: &Model, data: &GlyphDataset, batch: usize) -> Result<Evaluation> {
    evaluate_with(model, data, batch, &GumbelConfig::inference(), 0)
}

/// Sparse inference over a dataset; `gumbel` controls gate noise.
pub fn evaluate_with(
    model: &Model,
    data: &GlyphDataset,
    batch: usize,
    gumbel: &GumbelConfig,
    seed: u64,
) -> Result<Evaluation> {
    let cm = model.compile();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gated = model.spec.gated_blocks();
    let (mut correct, mut seen) = (0usize, 0usize);
    let mut sparse = vec![0.0f64; gated];
    let mut dense = vec![0.0f64; gated];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk);
        let out = cm.forward(&x, gumbel, &mut rng, BlockMode::Sparse, MaskPolicy::Gate)?;
        correct += out.predictions().iter().zip(&labels).filter(|(p, l)| p == l).count();
        seen += chunk.len();
        for (i, b) in out.budget.gated().enumerate() {
            sparse[i] += b.sparse_flops * chunk.len() as f64;
            dense[i] += b.dense_flops * chunk.len() as f64;
        }
    }
    let fractions: Vec<f64> = sparse.iter().zip(&dense).map(|(s, d)| s / d).collect();
    let (s, d): (f64, f64) = (sparse.iter().sum(), dense.iter().sum());
    Ok(Evaluation {
        accuracy: correct as f64 / seen.max(1) as f64,
        fractions,
        net_fraction: if d > 0.0 { s / d } else { 1.0 },
    })
}

/// Trains from scratch; `on_epoch` sees every log line as it is produced.
pub fn train(cfg: &Config, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let spec = cfg.model.spec();
    let sparsity = cfg.sparsity()?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let train = GlyphDataset::generate(t.train_size, spec.height, spec.width, rng.random());
    let val = GlyphDataset::generate(t.val_size, spec.height, spec.width, rng.random());
    let mut model = Model::init(spec, &mut rng)?;
    if let Some(b) = t.gate_bias_init {
        for blk in &mut model.blocks {
            if let Some(m) = blk.mask.as_mut() {
                if let Some(bias) = m.local.bias.as_mut() {
                    bias.data_mut()[0] = b;
                }
            }
        }
    }
    let kind = match t.optimizer {
        OptimizerName::Adam => OptimizerKind::adam(t.weight_decay as f32),
        OptimizerName::Sgd => OptimizerKind::sgd(t.momentum as f32, t.weight_decay as f32),
    };
    let mut opt = Optimizer::new(kind, model.params().iter().map(|p| p.len()));
    let quiet_from = noise_off_epoch(t.epochs, t.noise_off_fraction as f32);
    let tau = cfg.temperature();
    let gated = model.spec.gated_blocks();
    let mut metrics = Vec::with_capacity(t.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..t.epochs {
        let start = Instant::now();
        let lr = lr_at(cfg, epoch);
        let noise = epoch < quiet_from;
        let gumbel = GumbelConfig::new(tau.at(epoch), noise, t.seed)?;
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sums = [0.0f64; 5];
        let mut fr = vec![0.0f64; gated];
        let mut net = 0.0f64;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(t.batch_size).enumerate() {
            let (x, labels) = train.batch(chunk);
            let mut tape = Tape::new();
            let traced = model.forward_traced(&mut tape, &x, &gumbel, &mut rng, true, None)?;
            let loss = traced.loss(&mut tape, &labels, &sparsity, epoch)?;
            let val_of = |v: Option<_>| v.map_or(0.0, |v| tape.value(v).item() as f64);
            let vals = [
                tape.value(loss.task).item() as f64,
                val_of(loss.terms.net),
                val_of(loss.terms.lower),
                val_of(loss.terms.upper),
                tape.value(loss.total).item() as f64,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                bail!(
                    "non-finite loss at epoch {epoch}, batch {bi}: task {}, net {}, low {}, up {}, total {}",
                    vals[0],
                    vals[1],
                    vals[2],
                    vals[3],
                    vals[4]
                );
            }
            let grads = tape.backward(loss.total)?;
            let g: Vec<_> = traced.params.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut model.params_mut(), &g, lr as f32);
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            for (f, v) in fr.iter_mut().zip(traced.budget.fractions()) {
                *f += v;
            }
            net += traced.budget.network_fraction();
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let eval = evaluate(&model, &val, 64)?;
        let end = evaluate_with(&model, &val, 64, &gumbel, t.seed ^ epoch as u64)?;
        let m = EpochMetrics {
            epoch,
            lr,
            p: anneal_p(epoch, t.epochs),
            noise,
            temperature: gumbel.temperature,
            task_loss: sums[0] / nb,
            sp_net: sums[1] / nb,
            sp_low: sums[2] / nb,
            sp_up: sums[3] / nb,
            total_loss: sums[4] / nb,
            fractions: fr.iter().map(|f| f / nb).collect(),
            net_fraction: net / nb,
            end_fractions: end.fractions,
            val_accuracy: eval.accuracy,
            val_fractions: eval.fractions,
            val_net_fraction: eval.net_fraction,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { model, metrics, val })
}
