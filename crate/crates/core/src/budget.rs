//! FLOPs accounting and the sparsity losses that hold a network to a budget.
//!
//! Costs count multiply-accumulates of the convolutions in a block. The
//! executed fraction of block `b` is `f_b = F_sparse / F_dense`, with sparse
//! costs averaged over the batch. Each loss comes in a plain `f64` form for
//! reporting and a taped form for training.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::GatedBlockSpec;

/// Dense MACs of one block on an `h x w` plane:
/// `h*w*(9*C_e + C*C_e + C_e*C_out)`, i.e. `h*w*(9*C_e + 2*C*C_e)` for a
/// channel-preserving block.
pub fn flops_dense(spec: &GatedBlockSpec, h: usize, w: usize) -> u64 {
    let (c, ce, co) = (spec.channels as u64, spec.expansion_channels as u64, spec.out_channels as u64);
    (h * w) as u64 * (9 * ce + c * ce + ce * co)
}

/// Sparse MACs: the expansion runs on the dilated set, the depthwise and
/// projection only on the mask itself.
pub fn flops_sparse(spec: &GatedBlockSpec, active: u64, dilated: u64) -> u64 {
    let (c, ce, co) = (spec.channels as u64, spec.expansion_channels as u64, spec.out_channels as u64);
    dilated * c * ce + active * (9 * ce + ce * co)
}

/// Cost of one block for one batch, averaged per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockBudget {
    pub block: usize,
    pub gated: bool,
    /// `F_b` for one image.
    pub dense_flops: f64,
    /// `F_b,sp` averaged over the batch.
    pub sparse_flops: f64,
    /// Active positions `N_b`, summed over the batch.
    pub active: usize,
    /// Positions of the dilated mask, summed over the batch.
    pub dilated: usize,
    pub batch: usize,
}

impl BlockBudget {
    pub fn from_counts(block: usize, spec: &GatedBlockSpec, h: usize, w: usize, batch: usize, active: usize, dilated: usize) -> Self {
        let batch = batch.max(1);
        BlockBudget {
            block,
            gated: spec.gated,
            dense_flops: flops_dense(spec, h, w) as f64,
            sparse_flops: flops_sparse(spec, active as u64, dilated as u64) as f64 / batch as f64,
            active,
            dilated,
            batch,
        }
    }

    /// A block evaluated at every position.
    pub fn dense(block: usize, spec: &GatedBlockSpec, h: usize, w: usize, batch: usize) -> Self {
        let all = batch.max(1) * h * w;
        Self::from_counts(block, spec, h, w, batch, all, all)
    }

    pub fn fraction(&self) -> f64 {
        if self.dense_flops == 0.0 {
            0.0
        } else {
            self.sparse_flops / self.dense_flops
        }
    }
}

/// Per-block costs of one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BudgetReport {
    pub blocks: Vec<BlockBudget>,
}

impl BudgetReport {
    pub fn gated(&self) -> impl Iterator<Item = &BlockBudget> {
        self.blocks.iter().filter(|b| b.gated)
    }

    /// Executed fractions of the gated blocks.
    pub fn fractions(&self) -> Vec<f64> {
        self.gated().map(BlockBudget::fraction).collect()
    }

    /// `sum F_sp / sum F` over gated blocks; 1 when nothing is gated.
    pub fn network_fraction(&self) -> f64 {
        let (sp, dense) = self
            .gated()
            .fold((0.0, 0.0), |(s, d), b| (s + b.sparse_flops, d + b.dense_flops));
        if dense == 0.0 {
            1.0
        } else {
            sp / dense
        }
    }

    /// Per-image MACs over all blocks: `(dense, sparse)`. Ungated blocks count
    /// at full cost in both.
    pub fn total_macs(&self) -> (f64, f64) {
        self.blocks
            .iter()
            .fold((0.0, 0.0), |(d, s), b| (d + b.dense_flops, s + b.sparse_flops))
    }
}

/// Which sparsity terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Network-level budget only.
    Net,
    /// One budget per block.
    PerLayer,
    /// Network-level budget plus annealed per-block bounds.
    NetBounds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityConfig {
    pub theta: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub criterion: Criterion,
}

impl SparsityConfig {
    pub fn new(theta: f64, alpha: f64, epochs: usize, criterion: Criterion) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::Config("theta must lie in (0, 1]"));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative"));
        }
        if epochs == 0 {
            return Err(Error::Config("at least one epoch is required"));
        }
        Ok(SparsityConfig {
            theta,
            alpha,
            epochs,
            criterion,
        })
    }
}

/// Cosine annealing of the bound weight: 1 at the first epoch, 0 at the last.
/// A single-epoch run stays at 1.
pub fn anneal_p(epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return 1.0;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// Allowed band `[p*theta, 1 - p*(1 - theta)]` for a block's executed fraction.
pub fn bounds(p: f64, theta: f64) -> (f64, f64) {
    (p * theta, 1.0 - p * (1.0 - theta))
}

/// `(sum F_sp / sum F - theta)^2` over the gated blocks.
pub fn loss_net(report: &BudgetReport, theta: f64) -> f64 {
    let d = report.network_fraction() - theta;
    d * d
}

/// `sum_b (f_b - theta)^2`.
pub fn loss_per_layer(report: &BudgetReport, theta: f64) -> f64 {
    report.fractions().iter().map(|f| (f - theta) * (f - theta)).sum()
}

/// `(lower, upper)` bound losses, each averaged over the gated blocks.
pub fn loss_bounds(report: &BudgetReport, p: f64, theta: f64) -> (f64, f64) {
    let fr = report.fractions();
    if fr.is_empty() {
        return (0.0, 0.0);
    }
    let (lo, hi) = bounds(p, theta);
    let b = fr.len() as f64;
    let low = fr.iter().map(|f| { let v = (lo - f).max(0.0); v * v }).sum::<f64>() / b;
    let up = fr.iter().map(|f| { let v = (f - hi).max(0.0); v * v }).sum::<f64>() / b;
    (low, up)
}

/// Individual sparsity terms; the ones not selected by the criterion are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SparsityTerms {
    pub net: f64,
    pub per_layer: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SparsityTerms {
    pub fn sum(&self) -> f64 {
        self.net + self.per_layer + self.lower + self.upper
    }
}

pub fn sparsity_terms(report: &BudgetReport, cfg: &SparsityConfig, epoch: usize) -> SparsityTerms {
    match cfg.criterion {
        Criterion::Net => SparsityTerms {
            net: loss_net(report, cfg.theta),
            ..Default::default()
        },
        Criterion::PerLayer => SparsityTerms {
            per_layer: loss_per_layer(report, cfg.theta),
            ..Default::default()
        },
        Criterion::NetBounds => {
            let (lower, upper) = loss_bounds(report, anneal_p(epoch, cfg.epochs), cfg.theta);
            SparsityTerms {
                net: loss_net(report, cfg.theta),
                lower,
                upper,
                ..Default::default()
            }
        }
    }
}

/// `task + alpha * (selected sparsity terms)`.
pub fn total_loss(task: f64, report: &BudgetReport, cfg: &SparsityConfig, epoch: usize) -> f64 {
    task + cfg.alpha * sparsity_terms(report, cfg, epoch).sum()
}

/// Executed fraction of one gated block on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TracedFraction {
    /// Scalar `f_b`, differentiable through the gate output.
    pub fraction: Var,
    /// `F_b` for one image; weights the block in the network-level ratio.
    pub dense_flops: f64,
}

/// `f_b = (N_dil*C*C_e + N_b*(9*C_e + C_e*C_out)) / (batch * F_b)` with
/// `N_b = sum(gate)`. The dilated count is a constant of the hard mask.
pub fn traced_fraction(
    tape: &mut Tape,
    spec: &GatedBlockSpec,
    gate: Var,
    dilated: usize,
    h: usize,
    w: usize,
) -> TracedFraction {
    let batch = tape.shape(gate).n.max(1) as f64;
    let dense = flops_dense(spec, h, w) as f64;
    let (c, ce, co) = (spec.channels as f64, spec.expansion_channels as f64, spec.out_channels as f64);
    let denom = batch * dense;
    let n_b = tape.sum(gate);
    let per_active = tape.scale(n_b, ((9.0 * ce + ce * co) / denom) as f32);
    let fraction = tape.offset(per_active, (dilated as f64 * c * ce / denom) as f32);
    TracedFraction {
        fraction,
        dense_flops: dense,
    }
}

/// Taped sparsity terms; `None` entries were not selected by the criterion.
#[derive(Debug, Clone, Copy, Default)]
pub struct TracedTerms {
    pub net: Option<Var>,
    pub per_layer: Option<Var>,
    pub lower: Option<Var>,
    pub upper: Option<Var>,
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| tape.add(acc, v).expect("scalar add")))
}

pub fn traced_loss_net(tape: &mut Tape, fr: &[TracedFraction], theta: f64) -> Option<Var> {
    let total: f64 = fr.iter().map(|f| f.dense_flops).sum();
    if fr.is_empty() || total == 0.0 {
        return None;
    }
    let weighted: Vec<Var> = fr
        .iter()
        .map(|f| tape.scale(f.fraction, (f.dense_flops / total) as f32))
        .collect();
    let net = sum_vars(tape, &weighted)?;
    let d = tape.offset(net, -theta as f32);
    Some(tape.square(d))
}

pub fn traced_loss_per_layer(tape: &mut Tape, fr: &[TracedFraction], theta: f64) -> Option<Var> {
    let terms: Vec<Var> = fr
        .iter()
        .map(|f| {
            let d = tape.offset(f.fraction, -theta as f32);
            tape.square(d)
        })
        .collect();
    sum_vars(tape, &terms)
}

pub fn traced_loss_bounds(tape: &mut Tape, fr: &[TracedFraction], p: f64, theta: f64) -> Option<(Var, Var)> {
    if fr.is_empty() {
        return None;
    }
    let (lo, hi) = bounds(p, theta);
    let inv_b = 1.0 / fr.len() as f32;
    let mut lows = Vec::with_capacity(fr.len());
    let mut ups = Vec::with_capacity(fr.len());
    for f in fr {
        let neg = tape.scale(f.fraction, -1.0);
        let below = tape.offset(neg, lo as f32);
        let below = tape.relu(below);
        lows.push(tape.square(below));
        let above = tape.offset(f.fraction, -hi as f32);
        let above = tape.relu(above);
        ups.push(tape.square(above));
    }
    let low = sum_vars(tape, &lows)?;
    let up = sum_vars(tape, &ups)?;
    Some((tape.scale(low, inv_b), tape.scale(up, inv_b)))
}

pub fn traced_sparsity_terms(tape: &mut Tape, fr: &[TracedFraction], cfg: &SparsityConfig, epoch: usize) -> TracedTerms {
    match cfg.criterion {
        Criterion::Net => TracedTerms {
            net: traced_loss_net(tape, fr, cfg.theta),
            ..Default::default()
        },
        Criterion::PerLayer => TracedTerms {
            per_layer: traced_loss_per_layer(tape, fr, cfg.theta),
            ..Default::default()
        },
        Criterion::NetBounds => {
            let net = traced_loss_net(tape, fr, cfg.theta);
            let b = traced_loss_bounds(tape, fr, anneal_p(epoch, cfg.epochs), cfg.theta);
            TracedTerms {
                net,
                lower: b.map(|b| b.0),
                upper: b.map(|b| b.1),
                ..Default::default()
            }
        }
    }
}

/// `task + alpha * (selected terms)` on the tape.
pub fn traced_total_loss(tape: &mut Tape, task: Var, terms: &TracedTerms, alpha: f64) -> Var {
    let parts: Vec<Var> = [terms.net, terms.per_layer, terms.lower, terms.upper]
        .into_iter()
        .flatten()
        .collect();
    match sum_vars(tape, &parts) {
        Some(sp) => {
            let sp = tape.scale(sp, alpha as f32);
            tape.add(task, sp).expect("scalar add")
        }
        None => task,
    }
}
