//! Stem, a stack of residual blocks and a pooled linear classifier.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{self, Tape, Var};
use crate::budget::{traced_fraction, traced_sparsity_terms, traced_total_loss, BudgetReport, SparsityConfig, TracedFraction, TracedTerms};
use crate::error::{Error, Result};
use crate::gating::{BinaryMask, GumbelConfig};
use crate::kernels;
use crate::layers::{BatchNormParams, Conv1x1Params, DepthwiseParams};
use crate::sparse::{BlockMode, BlockParams, CompiledBlock, GatedBlockSpec, MaskSource, TracedBlock};
use crate::sparse::kaiming;
use crate::tensor::{Shape, Tensor4D};

/// Network layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channels produced by the stem.
    pub stem_channels: usize,
    /// 2x2 average pooling at the end of the stem.
    pub stem_pool: bool,
    pub blocks: Vec<GatedBlockSpec>,
    pub classes: usize,
}

impl ModelSpec {
    /// `blocks` gated inverted residual blocks on a pooled 32x32 single-channel input.
    pub fn toy(blocks: usize, channels: usize, expansion: usize, classes: usize) -> Self {
        ModelSpec {
            in_channels: 1,
            height: 32,
            width: 32,
            stem_channels: channels,
            stem_pool: true,
            blocks: (0..blocks)
                .map(|_| GatedBlockSpec::inverted_residual(channels, expansion))
                .collect(),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("input resolution must be positive"));
        }
        if self.stem_pool && (self.height % 2 != 0 || self.width % 2 != 0) {
            return Err(Error::Config("stem pooling needs an even input resolution"));
        }
        if self.classes == 0 {
            return Err(Error::Config("at least one class is required"));
        }
        let mut c = self.stem_channels;
        for b in &self.blocks {
            b.validate()?;
            if b.channels != c {
                return Err(Error::Config("block input channels do not match the previous layer"));
            }
            c = b.out_channels;
        }
        Ok(())
    }

    /// Spatial size seen by the blocks.
    pub fn feature_dims(&self) -> (usize, usize) {
        if self.stem_pool {
            (self.height / 2, self.width / 2)
        } else {
            (self.height, self.width)
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    pub fn gated_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.gated).count()
    }
}

/// Trainable network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub stem_conv: Conv1x1Params,
    pub stem_dw: DepthwiseParams,
    pub stem_bn: BatchNormParams,
    pub blocks: Vec<BlockParams>,
    pub head: Conv1x1Params,
}

/// Taped forward pass of a [`Model`].
#[derive(Debug, Clone)]
pub struct TracedModel {
    /// `(n, classes, 1, 1)`.
    pub logits: Var,
    pub blocks: Vec<TracedBlock>,
    /// One entry per gated block.
    pub fractions: Vec<TracedFraction>,
    /// Parameter leaves in [`Model::params`] order.
    pub params: Vec<Var>,
    pub budget: BudgetReport,
}

/// Loss nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct TracedLoss {
    pub total: Var,
    pub task: Var,
    pub terms: TracedTerms,
}

impl TracedModel {
    /// Cross-entropy plus `alpha` times the sparsity terms of the criterion.
    pub fn loss(&self, tape: &mut Tape, labels: &[usize], cfg: &SparsityConfig, epoch: usize) -> Result<TracedLoss> {
        let task = tape.softmax_cross_entropy(self.logits, labels)?;
        let terms = traced_sparsity_terms(tape, &self.fractions, cfg, epoch);
        let total = traced_total_loss(tape, task, &terms, cfg.alpha);
        Ok(TracedLoss { total, task, terms })
    }

    pub fn masks(&self) -> Vec<&BinaryMask> {
        self.blocks.iter().filter(|b| b.gate.is_some()).map(|b| &b.mask).collect()
    }
}

impl Model {
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (cin, c, k) = (spec.in_channels, spec.stem_channels, spec.classes);
        let stem_conv = Conv1x1Params::new(kaiming(Shape::new(c, cin, 1, 1), cin, 1.0, rng), None)?;
        let stem_dw = DepthwiseParams::new(kaiming(Shape::new(c, 1, 3, 3), 9, 1.0, rng), None)?;
        let blocks = spec
            .blocks
            .iter()
            .map(|&b| BlockParams::init(b, rng))
            .collect::<Result<Vec<_>>>()?;
        let cf = spec.feature_channels();
        let head = Conv1x1Params::new(
            kaiming(Shape::new(k, cf, 1, 1), cf, 1.0, rng),
            Some(Tensor4D::zeros(Shape::new(1, k, 1, 1))),
        )?;
        Ok(Model {
            stem_bn: BatchNormParams::new(c),
            spec,
            stem_conv,
            stem_dw,
            blocks,
            head,
        })
    }

    /// Trainable tensors: stem, blocks in order, head.
    pub fn params(&self) -> Vec<&Tensor4D> {
        let mut out = Vec::new();
        out.extend([&self.stem_conv.weight, &self.stem_dw.weight, &self.stem_bn.gamma, &self.stem_bn.beta]);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.push(&self.head.weight);
        out.extend(self.head.bias.as_ref());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor4D> {
        let mut out = Vec::new();
        out.extend([
            &mut self.stem_conv.weight,
            &mut self.stem_dw.weight,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ]);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head.weight);
        out.extend(self.head.bias.as_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let sp = &self.spec;
        if (s.c, s.h, s.w) != (sp.in_channels, sp.height, sp.width) {
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected: Shape::new(s.n, sp.in_channels, sp.height, sp.width),
                got: s,
            });
        }
        Ok(())
    }

    /// Taped forward pass. `bn_training` selects batch statistics (and
    /// updates the running estimates); `forced` replaces the gates of the
    /// gated blocks, in order.
    pub fn forward_traced<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        x: &Tensor4D,
        gumbel: &GumbelConfig,
        rng: &mut R,
        bn_training: bool,
        forced: Option<&[BinaryMask]>,
    ) -> Result<TracedModel> {
        let xs = x.shape();
        self.check_input(xs)?;
        if let Some(f) = forced {
            if f.len() != self.spec.gated_blocks() {
                return Err(Error::Config("one forced mask per gated block is required"));
            }
        }
        let mut params = Vec::new();
        let sw = tape.param(self.stem_conv.weight.clone());
        let sdw = tape.param(self.stem_dw.weight.clone());
        let sg = tape.param(self.stem_bn.gamma.clone());
        let sb = tape.param(self.stem_bn.beta.clone());
        params.extend([sw, sdw, sg, sb]);

        let xv = tape.constant(x.clone());
        let h = tape.conv1x1(xv, sw, None)?;
        let h = tape.depthwise3x3(h, sdw, None)?;
        let h = if bn_training {
            let (y, mean, var) = tape.batchnorm_train(h, sg, sb, self.stem_bn.eps)?;
            self.stem_bn.update_running(&mean, &var, xs.n * xs.plane());
            y
        } else {
            let bn = &self.stem_bn;
            tape.batchnorm_eval(h, sg, sb, &bn.running_mean, &bn.running_var, bn.eps)?
        };
        let mut h = tape.relu6(h);
        if self.spec.stem_pool {
            h = tape.avg_pool2(h)?;
        }

        let (fh, fw) = self.spec.feature_dims();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut fractions = Vec::new();
        let mut budget = BudgetReport::default();
        let mut gated = 0;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let f = if b.spec.gated {
                gated += 1;
                forced.map(|f| &f[gated - 1])
            } else {
                None
            };
            let tb = b.forward_traced(tape, h, gumbel, rng, bn_training, f)?;
            params.extend(tb.params.iter().copied());
            if let Some(g) = tb.gate {
                fractions.push(traced_fraction(tape, &b.spec, g, tb.dilated, fh, fw));
                budget.blocks.push(crate::budget::BlockBudget::from_counts(
                    i,
                    &b.spec,
                    fh,
                    fw,
                    xs.n,
                    tb.mask.count(),
                    tb.dilated,
                ));
            } else {
                budget
                    .blocks
                    .push(crate::budget::BlockBudget::dense(i, &b.spec, fh, fw, xs.n));
            }
            h = tb.output;
            blocks.push(tb);
        }

        let hw_ = tape.param(self.head.weight.clone());
        let hb = tape.param(self.head.bias.clone().expect("head bias"));
        params.extend([hw_, hb]);
        let pooled = tape.global_avg_pool(h);
        let logits = tape.conv1x1(pooled, hw_, Some(hb))?;
        Ok(TracedModel {
            logits,
            blocks,
            fractions,
            params,
            budget,
        })
    }

    /// Inference form with folded batch norm.
    pub fn compile(&self) -> CompiledModel {
        CompiledModel {
            spec: self.spec.clone(),
            stem_w: self.stem_conv.weight.data().to_vec(),
            stem_dw: self.stem_dw.weight.data().to_vec(),
            stem_bn: self.stem_bn.fold(),
            blocks: self.blocks.iter().map(BlockParams::compile).collect(),
            head_w: self.head.weight.data().to_vec(),
            head_b: self.head.bias_slice().map(<[f32]>::to_vec),
        }
    }
}

/// Mask choice for every gated block of a [`CompiledModel`].
#[derive(Debug, Clone, Copy)]
pub enum MaskPolicy<'a> {
    /// Masks from the mask units and gate.
    Gate,
    Full,
    Empty,
    /// One mask per gated block, in order.
    Fixed(&'a [BinaryMask]),
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(n, classes, 1, 1)`.
    pub logits: Tensor4D,
    /// Executed mask of each gated block.
    pub masks: Vec<BinaryMask>,
    pub budget: BudgetReport,
}

impl ModelOutput {
    /// Arg-max class per image.
    pub fn predictions(&self) -> Vec<usize> {
        let k = self.logits.shape().c;
        self.logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Inference-ready [`Model`].
#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub spec: ModelSpec,
    stem_w: Vec<f32>,
    stem_dw: Vec<f32>,
    stem_bn: (Vec<f32>, Vec<f32>),
    pub blocks: Vec<CompiledBlock>,
    head_w: Vec<f32>,
    head_b: Option<Vec<f32>>,
}

impl CompiledModel {
    /// Stem features `(n, stem_channels, fh, fw)`.
    pub fn stem(&self, x: &Tensor4D) -> Result<Tensor4D> {
        let s = x.shape();
        let sp = &self.spec;
        if (s.c, s.h, s.w) != (sp.in_channels, sp.height, sp.width) {
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected: Shape::new(s.n, sp.in_channels, sp.height, sp.width),
                got: s,
            });
        }
        let c = sp.stem_channels;
        let hw = s.plane();
        let h = kernels::conv1x1_nchw(x.data(), s.n, s.c, hw, &self.stem_w, None, c);
        let mut h = kernels::depthwise3x3_nchw(&h, s.n, c, s.h, s.w, &self.stem_dw, None);
        kernels::channel_affine_nchw(&mut h, s.n, c, hw, &self.stem_bn.0, &self.stem_bn.1);
        for v in &mut h {
            *v = kernels::relu6(*v);
        }
        let h = Tensor4D::from_vec(Shape::new(s.n, c, s.h, s.w), h)?;
        if sp.stem_pool {
            autodiff::avg_pool2(&h)
        } else {
            Ok(h)
        }
    }

    /// Global average pool and linear classifier.
    pub fn head(&self, features: &Tensor4D) -> Result<Tensor4D> {
        let s = features.shape();
        let k = self.spec.classes;
        let hw = s.plane() as f32;
        let pooled: Vec<f32> = features
            .data()
            .chunks_exact(s.plane())
            .map(|p| kernels::sum(p) / hw)
            .collect();
        let logits = kernels::conv1x1_nchw(&pooled, s.n, s.c, 1, &self.head_w, self.head_b.as_deref(), k);
        Tensor4D::from_vec(Shape::new(s.n, k, 1, 1), logits)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor4D,
        gumbel: &GumbelConfig,
        rng: &mut R,
        mode: BlockMode,
        policy: MaskPolicy<'_>,
    ) -> Result<ModelOutput> {
        let mut h = self.stem(x)?;
        let (n, fh, fw) = (h.shape().n, h.shape().h, h.shape().w);
        if let MaskPolicy::Fixed(m) = policy {
            if m.len() != self.spec.gated_blocks() {
                return Err(Error::Config("one fixed mask per gated block is required"));
            }
        }
        let (full, empty) = (BinaryMask::full(n, fh, fw), BinaryMask::empty(n, fh, fw));
        let mut masks = Vec::new();
        let mut budget = BudgetReport::default();
        for (i, b) in self.blocks.iter().enumerate() {
            let source = if !b.spec.gated {
                MaskSource::Gate
            } else {
                match policy {
                    MaskPolicy::Gate => MaskSource::Gate,
                    MaskPolicy::Full => MaskSource::Fixed(&full),
                    MaskPolicy::Empty => MaskSource::Fixed(&empty),
                    MaskPolicy::Fixed(m) => MaskSource::Fixed(&m[masks.len()]),
                }
            };
            let mut out = b.run(&h, gumbel, rng, mode, source)?;
            out.budget.block = i;
            if b.spec.gated {
                masks.push(out.mask);
            }
            budget.blocks.push(out.budget);
            h = out.output;
        }
        Ok(ModelOutput {
            logits: self.head(&h)?,
            masks,
            budget,
        })
    }
}
