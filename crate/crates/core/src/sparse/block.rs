use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{depthwise_rows, dilate_mask, gather_rows, scatter_add_rows, GatherIndex};
use crate::autodiff::{Tape, Var};
use crate::budget::BlockBudget;
use crate::error::{Error, Result};
use crate::gating::{self, BinaryMask, GumbelConfig, MaskUnitKind, MaskUnitParams, MaskUnitSpec, SoftMask};
use crate::kernels;
use crate::layers::{BatchNormParams, Conv1x1Params, DepthwiseParams};
use crate::tensor::{Shape, Tensor4D};

/// Activation applied after the residual sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualActivation {
    /// Linear bottleneck (inverted residual blocks).
    Identity,
    /// ResNet-style blocks.
    Relu,
}

impl ResidualActivation {
    fn apply(self, data: &mut [f32]) {
        if self == ResidualActivation::Relu {
            for v in data {
                *v = kernels::relu(*v);
            }
        }
    }
}

/// Shape of one expand -> depthwise -> project block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GatedBlockSpec {
    pub channels: usize,
    pub expansion_channels: usize,
    pub out_channels: usize,
    pub mask_unit: MaskUnitKind,
    pub gated: bool,
    pub residual: ResidualActivation,
}

impl GatedBlockSpec {
    /// Gated inverted residual block with a squeeze mask unit.
    pub fn inverted_residual(channels: usize, expansion: usize) -> Self {
        GatedBlockSpec {
            channels,
            expansion_channels: channels * expansion,
            out_channels: channels,
            mask_unit: MaskUnitKind::Squeeze,
            gated: true,
            residual: ResidualActivation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channels must be positive"));
        }
        if self.expansion_channels < self.channels {
            return Err(Error::Config("expansion channels must be at least the base channels"));
        }
        if self.gated && self.out_channels != self.channels {
            return Err(Error::Config("gated blocks must preserve the channel count"));
        }
        Ok(())
    }

    /// Whether the block adds its input back (channel-preserving blocks).
    pub fn has_skip(&self) -> bool {
        self.out_channels == self.channels
    }

    pub fn mask_spec(&self) -> MaskUnitSpec {
        MaskUnitSpec {
            kind: self.mask_unit,
            in_channels: self.channels,
        }
    }
}

/// Trainable weights and normalisation statistics of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub spec: GatedBlockSpec,
    pub mask: Option<MaskUnitParams>,
    pub expand: Conv1x1Params,
    pub bn1: BatchNormParams,
    pub depthwise: DepthwiseParams,
    pub bn2: BatchNormParams,
    pub project: Conv1x1Params,
    pub bn3: BatchNormParams,
}

/// Initial bias of the mask unit; positive so that early masks are mostly on.
pub const MASK_BIAS_INIT: f32 = 1.0;
/// Extra scale on the mask unit's fan-in initialisation.
pub const MASK_WEIGHT_GAIN: f32 = 0.1;

pub(crate) fn kaiming<R: Rng + ?Sized>(shape: Shape, fan_in: usize, gain: f32, rng: &mut R) -> Tensor4D {
    let std = gain * libm::sqrtf(2.0 / fan_in.max(1) as f32);
    let normal = Normal::new(0.0f32, std).expect("finite std");
    Tensor4D::from_fn(shape, |_, _, _, _| normal.sample(rng))
}

impl BlockParams {
    /// Fan-in scaled normal weights; convolutions that feed batch norm carry no bias.
    pub fn init<R: Rng + ?Sized>(spec: GatedBlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (c, ce, co) = (spec.channels, spec.expansion_channels, spec.out_channels);
        let mask = spec.gated.then(|| {
            let ms = spec.mask_spec();
            let mut p = MaskUnitParams::zeros(ms, MASK_BIAS_INIT);
            p.local.weight = kaiming(Shape::new(1, c, 1, 1), c, MASK_WEIGHT_GAIN, rng);
            if let Some(g) = p.global.as_mut() {
                g.weight = kaiming(Shape::new(1, c, 1, 1), c, MASK_WEIGHT_GAIN, rng);
            }
            p
        });
        Ok(BlockParams {
            spec,
            mask,
            expand: Conv1x1Params::new(kaiming(Shape::new(ce, c, 1, 1), c, 1.0, rng), None)?,
            bn1: BatchNormParams::new(ce),
            depthwise: DepthwiseParams::new(kaiming(Shape::new(ce, 1, 3, 3), 9, 1.0, rng), None)?,
            bn2: BatchNormParams::new(ce),
            project: Conv1x1Params::new(kaiming(Shape::new(co, ce, 1, 1), ce, 1.0, rng), None)?,
            bn3: BatchNormParams::new(co),
        })
    }

    /// Trainable tensors in a fixed order, shared by [`Self::params_mut`] and
    /// the taped forward pass.
    pub fn params(&self) -> Vec<&Tensor4D> {
        let mut out = Vec::new();
        if let Some(m) = &self.mask {
            out.push(&m.local.weight);
            out.extend(m.local.bias.as_ref());
            if let Some(g) = &m.global {
                out.push(&g.weight);
                out.extend(g.bias.as_ref());
            }
        }
        out.extend([
            &self.expand.weight,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.depthwise.weight,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.project.weight,
            &self.bn3.gamma,
            &self.bn3.beta,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor4D> {
        let mut out = Vec::new();
        if let Some(m) = &mut self.mask {
            out.push(&mut m.local.weight);
            out.extend(m.local.bias.as_mut());
            if let Some(g) = &mut m.global {
                out.push(&mut g.weight);
                out.extend(g.bias.as_mut());
            }
        }
        out.extend([
            &mut self.expand.weight,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.depthwise.weight,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.project.weight,
            &mut self.bn3.gamma,
            &mut self.bn3.beta,
        ]);
        out
    }

    pub fn bn_mut(&mut self) -> [&mut BatchNormParams; 3] {
        [&mut self.bn1, &mut self.bn2, &mut self.bn3]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Inference form: folded batch norm, transposed pointwise weights.
    pub fn compile(&self) -> CompiledBlock {
        let fold = |bn: &BatchNormParams| bn.fold();
        CompiledBlock {
            spec: self.spec,
            mask: self.mask.clone(),
            expand_w: self.expand.weight.data().to_vec(),
            expand_wt: kernels::transpose(self.expand.weight.data(), self.spec.expansion_channels, self.spec.channels),
            bn1: fold(&self.bn1),
            dw: self.depthwise.weight.data().to_vec(),
            dw_taps: self.depthwise.taps_major(),
            bn2: fold(&self.bn2),
            project_w: self.project.weight.data().to_vec(),
            project_wt: kernels::transpose(
                self.project.weight.data(),
                self.spec.out_channels,
                self.spec.expansion_channels,
            ),
            bn3: fold(&self.bn3),
        }
    }

    /// Train-mode forward on a tape: `r(F(x) * G + x)` with the
    /// straight-through gate. `forced` replaces the gate with a fixed mask.
    pub fn forward_traced<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        x: Var,
        gumbel: &GumbelConfig,
        rng: &mut R,
        bn_training: bool,
        forced: Option<&BinaryMask>,
    ) -> Result<TracedBlock> {
        let spec = self.spec;
        let xs = tape.shape(x);
        if xs.c != spec.channels {
            return Err(Error::ChannelMismatch {
                op: "block",
                expected: spec.channels,
                got: xs.c,
            });
        }
        let params: Vec<Var> = self.params().into_iter().map(|t| tape.param(t.clone())).collect();
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list");

        let (logits, gate) = match &self.mask {
            Some(m) => {
                let local = (next(), next());
                let global = m.global.as_ref().map(|_| (next(), next()));
                let logits = gating::mask_unit_traced(tape, x, local, global)?;
                let gate = match forced {
                    Some(mask) => tape.constant(mask.to_tensor()),
                    None => gating::gate_traced(tape, logits, gumbel, rng)?,
                };
                (Some(logits), Some(gate))
            }
            None => (None, None),
        };
        let (ew, g1, b1, dw, g2, b2, pw, g3, b3) = (next(), next(), next(), next(), next(), next(), next(), next(), next());

        let count = xs.n * xs.plane();
        let bn = |tape: &mut Tape, v: Var, gamma: Var, beta: Var, p: &mut BatchNormParams| -> Result<Var> {
            if bn_training {
                let (y, mean, var) = tape.batchnorm_train(v, gamma, beta, p.eps)?;
                p.update_running(&mean, &var, count);
                Ok(y)
            } else {
                tape.batchnorm_eval(v, gamma, beta, &p.running_mean, &p.running_var, p.eps)
            }
        };
        let e = tape.conv1x1(x, ew, None)?;
        let e = bn(tape, e, g1, b1, &mut self.bn1)?;
        let e = tape.relu6(e);
        let d = tape.depthwise3x3(e, dw, None)?;
        let d = bn(tape, d, g2, b2, &mut self.bn2)?;
        let d = tape.relu6(d);
        let f = tape.conv1x1(d, pw, None)?;
        let f = bn(tape, f, g3, b3, &mut self.bn3)?;

        let f = match gate {
            Some(g) => tape.mul_spatial(f, g)?,
            None => f,
        };
        let mut out = if spec.has_skip() { tape.add(f, x)? } else { f };
        if spec.residual == ResidualActivation::Relu {
            out = tape.relu(out);
        }
        let (mask, dilated) = match gate {
            Some(g) => {
                let m = BinaryMask::from_tensor(tape.value(g));
                let d = dilate_mask(&m).count();
                (m, d)
            }
            None => {
                let m = BinaryMask::full(xs.n, xs.h, xs.w);
                let d = m.len();
                (m, d)
            }
        };
        Ok(TracedBlock {
            output: out,
            logits,
            gate,
            mask,
            dilated,
            params,
        })
    }
}

/// Result of [`BlockParams::forward_traced`].
#[derive(Debug, Clone)]
pub struct TracedBlock {
    pub output: Var,
    /// Mask-unit logits `M_b`; `None` for ungated blocks.
    pub logits: Option<Var>,
    /// Hard gate output `G_b` as an `(n, 1, h, w)` tape value.
    pub gate: Option<Var>,
    pub mask: BinaryMask,
    /// Active positions of the dilated mask over the batch.
    pub dilated: usize,
    /// Parameter leaves in [`BlockParams::params`] order.
    pub params: Vec<Var>,
}

/// Dilated gather set and output rows for one mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePlan {
    pub mask: BinaryMask,
    pub dilated: BinaryMask,
    /// Index over the dilated mask; the expansion runs on all of its rows.
    pub index: GatherIndex,
    /// Rows of `index` that lie in the undilated mask, in mask order.
    pub out_rows: Vec<u32>,
    /// Flat mask offsets of `out_rows`.
    pub out_positions: Vec<u32>,
}

impl SparsePlan {
    pub fn new(mask: BinaryMask) -> Self {
        let dilated = dilate_mask(&mask);
        let index = GatherIndex::build(&dilated);
        let mut out_rows = Vec::with_capacity(mask.count());
        let mut out_positions = Vec::with_capacity(mask.count());
        for (i, &b) in mask.bits().iter().enumerate() {
            if b {
                out_rows.push(index.inverse()[i]);
                out_positions.push(i as u32);
            }
        }
        SparsePlan {
            mask,
            dilated,
            index,
            out_rows,
            out_positions,
        }
    }
}

/// Inference-ready block with folded batch norm.
#[derive(Debug, Clone)]
pub struct CompiledBlock {
    pub spec: GatedBlockSpec,
    mask: Option<MaskUnitParams>,
    expand_w: Vec<f32>,
    expand_wt: Vec<f32>,
    bn1: (Vec<f32>, Vec<f32>),
    dw: Vec<f32>,
    dw_taps: Vec<f32>,
    bn2: (Vec<f32>, Vec<f32>),
    project_w: Vec<f32>,
    project_wt: Vec<f32>,
    bn3: (Vec<f32>, Vec<f32>),
}

fn relu6_in_place(v: &mut [f32]) {
    for x in v {
        *x = kernels::relu6(*x);
    }
}

impl CompiledBlock {
    fn check_input(&self, x: &Tensor4D) -> Result<()> {
        if x.shape().c != self.spec.channels {
            return Err(Error::ChannelMismatch {
                op: "block",
                expected: self.spec.channels,
                got: x.shape().c,
            });
        }
        Ok(())
    }

    /// Mask-unit logits over every position; `None` for ungated blocks.
    pub fn mask_logits(&self, x: &Tensor4D) -> Result<Option<SoftMask>> {
        self.check_input(x)?;
        match &self.mask {
            Some(m) => gating::mask_unit_forward(x, self.spec.mask_spec(), m).map(Some),
            None => Ok(None),
        }
    }

    /// Residual function `F(x)` at every position, `(n, out_channels, h, w)`.
    pub fn residual_dense(&self, x: &Tensor4D) -> Result<Tensor4D> {
        self.check_input(x)?;
        let s = x.shape();
        let (c, ce, co, hw) = (s.c, self.spec.expansion_channels, self.spec.out_channels, s.plane());
        let mut e = kernels::conv1x1_nchw(x.data(), s.n, c, hw, &self.expand_w, None, ce);
        kernels::channel_affine_nchw(&mut e, s.n, ce, hw, &self.bn1.0, &self.bn1.1);
        relu6_in_place(&mut e);
        let mut d = kernels::depthwise3x3_nchw(&e, s.n, ce, s.h, s.w, &self.dw, None);
        kernels::channel_affine_nchw(&mut d, s.n, ce, hw, &self.bn2.0, &self.bn2.1);
        relu6_in_place(&mut d);
        let mut f = kernels::conv1x1_nchw(&d, s.n, ce, hw, &self.project_w, None, co);
        kernels::channel_affine_nchw(&mut f, s.n, co, hw, &self.bn3.0, &self.bn3.1);
        Tensor4D::from_vec(Shape::new(s.n, co, s.h, s.w), f)
    }

    /// Dense execution: `r(F(x) * G + x)`, or `r(F(x) + x)` without a mask.
    pub fn forward_dense(&self, x: &Tensor4D, mask: Option<&BinaryMask>) -> Result<Tensor4D> {
        let f = self.residual_dense(x)?;
        let s = x.shape();
        let hw = s.plane();
        let mut out = if self.spec.has_skip() {
            let mut out = x.clone();
            for b in 0..s.n {
                for ch in 0..s.c {
                    let fp = f.plane(b, ch);
                    let o = out.plane_mut(b, ch);
                    match mask {
                        Some(m) => {
                            let mp = &m.bits()[b * hw..(b + 1) * hw];
                            for ((o, &fv), &on) in o.iter_mut().zip(fp).zip(mp) {
                                *o += fv * if on { 1.0 } else { 0.0 };
                            }
                        }
                        None => {
                            for (o, &fv) in o.iter_mut().zip(fp) {
                                *o += fv;
                            }
                        }
                    }
                }
            }
            out
        } else {
            f
        };
        self.spec.residual.apply(out.data_mut());
        Ok(out)
    }

    /// Mask thresholding is done by the caller; this dilates and indexes.
    pub fn plan(&self, mask: BinaryMask) -> SparsePlan {
        SparsePlan::new(mask)
    }

    /// Rows of `x` at the dilated positions, `(P_dilated, C, 1, 1)`.
    pub fn gather(&self, x: &Tensor4D, plan: &SparsePlan) -> Result<Tensor4D> {
        super::gather(x, &plan.index)
    }

    /// Residual function on gathered rows: expansion on all dilated rows,
    /// depthwise and projection only on `plan.out_rows`.
    pub fn residual_rows(&self, rows: &Tensor4D, plan: &SparsePlan) -> Result<Tensor4D> {
        let (c, ce, co) = (self.spec.channels, self.spec.expansion_channels, self.spec.out_channels);
        if rows.shape() != Shape::new(plan.index.len(), c, 1, 1) {
            return Err(Error::RowCount {
                op: "residual_rows",
                expected: plan.index.len(),
                got: rows.shape().n,
            });
        }
        let mut e = kernels::conv1x1_rows(rows.data(), c, &self.expand_wt, None, ce);
        kernels::channel_affine_rows(&mut e, ce, &self.bn1.0, &self.bn1.1);
        relu6_in_place(&mut e);
        let mut d = depthwise_rows(&e, ce, &plan.index, &plan.out_rows, &self.dw_taps, None)?;
        kernels::channel_affine_rows(&mut d, ce, &self.bn2.0, &self.bn2.1);
        relu6_in_place(&mut d);
        let mut f = kernels::conv1x1_rows(&d, ce, &self.project_wt, None, co);
        kernels::channel_affine_rows(&mut f, co, &self.bn3.0, &self.bn3.1);
        Tensor4D::from_vec(Shape::new(plan.out_rows.len(), co, 1, 1), f)
    }

    /// Output buffer initialised from `x`, residual rows added at the mask
    /// positions, then the residual activation.
    pub fn scatter(&self, x: &Tensor4D, residual: &Tensor4D, plan: &SparsePlan) -> Result<Tensor4D> {
        let s = x.shape();
        if residual.shape().n != plan.out_positions.len() {
            return Err(Error::RowCount {
                op: "scatter",
                expected: plan.out_positions.len(),
                got: residual.shape().n,
            });
        }
        let mut out = x.clone();
        scatter_add_rows(out.data_mut(), residual.data(), s.c, s.plane(), &plan.out_positions);
        self.spec.residual.apply(out.data_mut());
        Ok(out)
    }

    /// Sparse execution on a fixed mask.
    pub fn forward_sparse(&self, x: &Tensor4D, mask: &BinaryMask) -> Result<(Tensor4D, SparsePlan)> {
        self.check_input(x)?;
        let s = x.shape();
        if mask.dims() != (s.n, s.h, s.w) {
            return Err(Error::ShapeMismatch {
                op: "block mask",
                expected: Shape::new(s.n, 1, s.h, s.w),
                got: Shape::new(mask.dims().0, 1, mask.dims().1, mask.dims().2),
            });
        }
        if !self.spec.has_skip() {
            return Err(Error::Config("sparse execution needs a channel-preserving block"));
        }
        let plan = self.plan(mask.clone());
        let rows = gather_rows(x.data(), s.c, s.plane(), plan.index.positions());
        let rows = Tensor4D::from_vec(Shape::new(plan.index.len(), s.c, 1, 1), rows)?;
        let res = self.residual_rows(&rows, &plan)?;
        let out = self.scatter(x, &res, &plan)?;
        Ok((out, plan))
    }

    /// MACs performed by [`Self::residual_rows`] for a plan.
    pub fn sparse_macs(&self, plan: &SparsePlan) -> u64 {
        let (c, ce, co) = (
            self.spec.channels as u64,
            self.spec.expansion_channels as u64,
            self.spec.out_channels as u64,
        );
        plan.index.len() as u64 * c * ce + plan.out_rows.len() as u64 * (9 * ce + ce * co)
    }

    /// Full block with a mask drawn from the gate or supplied by the caller.
    pub fn run<R: Rng + ?Sized>(
        &self,
        x: &Tensor4D,
        gumbel: &GumbelConfig,
        rng: &mut R,
        mode: BlockMode,
        source: MaskSource<'_>,
    ) -> Result<BlockOutput> {
        self.check_input(x)?;
        let s = x.shape();
        if !self.spec.gated {
            let output = self.forward_dense(x, None)?;
            return Ok(BlockOutput {
                output,
                mask: BinaryMask::full(s.n, s.h, s.w),
                budget: BlockBudget::dense(0, &self.spec, s.h, s.w, s.n),
            });
        }
        let mask = match source {
            MaskSource::Fixed(m) => m.clone(),
            MaskSource::Gate => {
                let logits = self.mask_logits(x)?.expect("gated block has a mask unit");
                gating::gate_forward(&logits, gumbel, rng)
            }
        };
        let (output, dilated) = match mode {
            BlockMode::DenseMasked => {
                let out = self.forward_dense(x, Some(&mask))?;
                (out, dilate_mask(&mask).count())
            }
            BlockMode::Sparse => {
                let (out, plan) = self.forward_sparse(x, &mask)?;
                (out, plan.index.len())
            }
        };
        let budget = BlockBudget::from_counts(0, &self.spec, s.h, s.w, s.n, mask.count(), dilated);
        Ok(BlockOutput { output, mask, budget })
    }
}

/// How a block is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockMode {
    /// Residual function everywhere, multiplied by the mask.
    DenseMasked,
    /// Gather, compute on active rows, scatter.
    Sparse,
}

/// Where the execution mask comes from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    Gate,
    Fixed(&'a BinaryMask),
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub output: Tensor4D,
    pub mask: BinaryMask,
    pub budget: BlockBudget,
}

/// One block on `x`. Ungated blocks always run densely.
pub fn block_forward<R: Rng + ?Sized>(
    x: &Tensor4D,
    params: &BlockParams,
    gumbel: &GumbelConfig,
    rng: &mut R,
    mode: BlockMode,
    source: MaskSource<'_>,
) -> Result<BlockOutput> {
    params.compile().run(x, gumbel, rng, mode, source)
}
