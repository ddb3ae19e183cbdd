//! Dense versus sparse execution check.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynconv_core::autodiff::Tape;
use dynconv_core::gating::{BinaryMask, GumbelConfig};
use dynconv_core::model::{MaskPolicy, Model};
use dynconv_core::sparse::{BlockMode, MaskSource};
use dynconv_core::{Shape, Tensor4D};

/// Failure threshold on the maximum relative error.
pub const VERIFY_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    /// Largest error of each block, comparing sparse and dense-masked
    /// execution on the same input and mask.
    pub per_block: Vec<f32>,
    /// Largest error of the logits: taped dense forward (noise off,
    /// inference batch norm) against sparse inference.
    pub end_to_end: f32,
    pub trials: usize,
    /// Mean executed fraction of the gated blocks.
    pub mean_density: f64,
}

impl VerifyReport {
    pub fn max_error(&self) -> f32 {
        self.per_block.iter().copied().fold(self.end_to_end, f32::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= VERIFY_TOLERANCE
    }
}

/// How masks are chosen during verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VerifyMasks {
    /// Noise-free masks from the model's mask units.
    Learned,
    Full,
    Empty,
}

/// Runs `trials` single-image inputs drawn uniformly from `[-1, 1]`.
pub fn verify_equivalence(model: &Model, trials: usize, seed: u64, masks: VerifyMasks) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = &model.spec;
    let shape = Shape::new(1, s.in_channels, s.height, s.width);
    let inputs: Vec<Tensor4D> = (0..trials)
        .map(|_| Tensor4D::from_fn(shape, |_, _, _, _| rng.random_range(-1.0f32..1.0)))
        .collect();
    verify_inputs(model, &inputs, masks)
}

pub fn verify_inputs(model: &Model, inputs: &[Tensor4D], masks: VerifyMasks) -> Result<VerifyReport> {
    let cm = model.compile();
    let gumbel = GumbelConfig::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut per_block = vec![0.0f32; cm.blocks.len()];
    let mut end_to_end = 0.0f32;
    let mut density = 0.0f64;
    let mut gated_runs = 0usize;
    for x in inputs {
        let mut h = cm.stem(x)?;
        let (n, fh, fw) = (h.shape().n, h.shape().h, h.shape().w);
        let mut used = Vec::new();
        for (i, b) in cm.blocks.iter().enumerate() {
            let mask = match masks {
                _ if !b.spec.gated => None,
                VerifyMasks::Full => Some(BinaryMask::full(n, fh, fw)),
                VerifyMasks::Empty => Some(BinaryMask::empty(n, fh, fw)),
                VerifyMasks::Learned => {
                    let logits = b.mask_logits(&h)?.expect("gated block");
                    Some(dynconv_core::gating::gate_forward(&logits, &gumbel, &mut rng))
                }
            };
            let source = mask.as_ref().map_or(MaskSource::Gate, MaskSource::Fixed);
            let dense = b.run(&h, &gumbel, &mut rng, BlockMode::DenseMasked, source)?;
            let sparse = b.run(&h, &gumbel, &mut rng, BlockMode::Sparse, source)?;
            per_block[i] = per_block[i].max(sparse.output.max_rel_diff(&dense.output));
            if let Some(m) = mask {
                density += sparse.budget.fraction();
                gated_runs += 1;
                used.push(m);
            }
            h = sparse.output;
        }
        let sparse = cm.forward(x, &gumbel, &mut rng, BlockMode::Sparse, MaskPolicy::Fixed(&used))?;
        let mut tape = Tape::new();
        let mut m = model.clone();
        let traced = m.forward_traced(&mut tape, x, &gumbel, &mut rng, false, Some(&used))?;
        end_to_end = end_to_end.max(sparse.logits.max_rel_diff(tape.value(traced.logits)));
    }
    Ok(VerifyReport {
        per_block,
        end_to_end,
        trials: inputs.len(),
        mean_density: if gated_runs == 0 { 1.0 } else { density / gated_runs as f64 },
    })
}
