//! Mask units and the binary Gumbel-Softmax gate.
//!
//! A mask unit maps block input `(n, c, h, w)` to one logit per pixel. The
//! gate turns logits into execution decisions `z = [(m + g1 - g2) / tau > 0]`
//! and, on the tape, back-propagates as the relaxed sample
//! `sigmoid((m + g1 - g2) / tau)`.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{self, Conv1x1Params};
use crate::tensor::{Shape, Tensor4D};

/// Uniform samples are clamped to `[U_MIN, 1 - U_MIN]` before the double log.
pub const U_MIN: f64 = 1e-7;

/// Per-pixel gating logits, stored as an `(n, 1, h, w)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(pub Tensor4D);

impl SoftMask {
    pub fn new(t: Tensor4D) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 {
            return Err(Error::ChannelMismatch {
                op: "soft mask",
                expected: 1,
                got: s.c,
            });
        }
        Ok(SoftMask(t))
    }

    pub fn constant(n: usize, h: usize, w: usize, value: f32) -> Self {
        SoftMask(Tensor4D::full(Shape::new(n, 1, h, w), value))
    }

    pub fn tensor(&self) -> &Tensor4D {
        &self.0
    }

    pub fn values(&self) -> &[f32] {
        self.0.data()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s.n, s.h, s.w)
    }
}

/// Per-sample execution mask of shape `(n, h, w)`, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    n: usize,
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(n: usize, h: usize, w: usize) -> Self {
        BinaryMask {
            n,
            h,
            w,
            bits: alloc::vec![false; n * h * w],
        }
    }

    pub fn full(n: usize, h: usize, w: usize) -> Self {
        BinaryMask {
            n,
            h,
            w,
            bits: alloc::vec![true; n * h * w],
        }
    }

    pub fn from_bits(n: usize, h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * h * w {
            return Err(Error::DataLength {
                shape: Shape::new(n, 1, h, w),
                len: bits.len(),
            });
        }
        Ok(BinaryMask { n, h, w, bits })
    }

    pub fn from_fn(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    bits.push(f(b, y, x));
                }
            }
        }
        BinaryMask { n, h, w, bits }
    }

    /// Entries `> 0.5` of an `(n, 1, h, w)` tensor.
    pub fn from_tensor(t: &Tensor4D) -> Self {
        let s = t.shape();
        debug_assert_eq!(s.c, 1);
        BinaryMask {
            n: s.n,
            h: s.h,
            w: s.w,
            bits: t.data().iter().map(|&v| v > 0.5).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor4D {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor4D::from_vec(Shape::new(self.n, 1, self.h, self.w), data).expect("mask shape")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize) -> usize {
        (n * self.h + h) * self.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize) -> bool {
        self.bits[self.index(n, h, w)]
    }

    pub fn set(&mut self, n: usize, h: usize, w: usize, v: bool) {
        let i = self.index(n, h, w);
        self.bits[i] = v;
    }

    /// Number of active positions over the whole batch.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_in(&self, n: usize) -> usize {
        let hw = self.h * self.w;
        self.bits[n * hw..(n + 1) * hw].iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Active coordinates `(n, h, w)` in flattened order.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (h, w) = (self.h, self.w);
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / (h * w), (i / w) % h, i % w))
    }
}

/// Gate temperature and noise switch. The seed feeds the caller's generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f32,
    pub noise: bool,
    pub seed: u64,
}

impl GumbelConfig {
    pub fn new(temperature: f32, noise: bool, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config("gumbel temperature must be positive"));
        }
        Ok(GumbelConfig {
            temperature,
            noise,
            seed,
        })
    }

    /// Noise-free gating at temperature one, as used for inference.
    pub fn inference() -> Self {
        GumbelConfig {
            temperature: 1.0,
            noise: false,
            seed: 0,
        }
    }
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: 1.0,
            noise: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskUnitKind {
    /// A single-output pointwise convolution.
    Conv1x1,
    /// Pointwise term plus a broadcast term computed from globally pooled features.
    Squeeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskUnitSpec {
    pub kind: MaskUnitKind,
    pub in_channels: usize,
}

/// Mask unit weights. `global` is present only for [`MaskUnitKind::Squeeze`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskUnitParams {
    pub local: Conv1x1Params,
    pub global: Option<Conv1x1Params>,
}

impl MaskUnitParams {
    /// Zero weights; the local bias is `bias`.
    pub fn zeros(spec: MaskUnitSpec, bias: f32) -> Self {
        let mut local = Conv1x1Params::zeros(spec.in_channels, 1, true);
        if let Some(b) = local.bias.as_mut() {
            b.data_mut()[0] = bias;
        }
        MaskUnitParams {
            local,
            global: (spec.kind == MaskUnitKind::Squeeze).then(|| Conv1x1Params::zeros(spec.in_channels, 1, true)),
        }
    }

    pub fn check(&self, spec: MaskUnitSpec) -> Result<()> {
        let want_global = spec.kind == MaskUnitKind::Squeeze;
        if self.global.is_some() != want_global {
            return Err(Error::Config("mask unit parameters do not match the unit kind"));
        }
        for p in core::iter::once(&self.local).chain(self.global.as_ref()) {
            if p.c_in() != spec.in_channels || p.c_out() != 1 {
                return Err(Error::ChannelMismatch {
                    op: "mask unit",
                    expected: spec.in_channels,
                    got: p.c_in(),
                });
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.local.num_params() + self.global.as_ref().map_or(0, Conv1x1Params::num_params)
    }
}

/// Per-pixel gating logits for block input `x`.
pub fn mask_unit_forward(x: &Tensor4D, spec: MaskUnitSpec, params: &MaskUnitParams) -> Result<SoftMask> {
    params.check(spec)?;
    let s = x.shape();
    if s.c != spec.in_channels {
        return Err(Error::ChannelMismatch {
            op: "mask unit",
            expected: spec.in_channels,
            got: s.c,
        });
    }
    let mut m = layers::conv1x1(x, &params.local)?;
    if let Some(global) = &params.global {
        let pooled: Vec<f32> = x
            .data()
            .chunks_exact(s.plane())
            .map(|p| kernels::sum(p) / s.plane() as f32)
            .collect();
        let g = kernels::conv1x1_nchw(&pooled, s.n, s.c, 1, global.weight.data(), global.bias_slice(), 1);
        for (plane, gv) in m.data_mut().chunks_exact_mut(s.plane()).zip(g) {
            for v in plane {
                *v += gv;
            }
        }
    }
    SoftMask::new(m)
}

/// Records the mask unit on a tape. `local`/`global` are `(weight, bias)` vars.
pub fn mask_unit_traced(tape: &mut Tape, x: Var, local: (Var, Var), global: Option<(Var, Var)>) -> Result<Var> {
    let m = tape.conv1x1(x, local.0, Some(local.1))?;
    match global {
        Some((w, b)) => {
            let pooled = tape.global_avg_pool(x);
            let g = tape.conv1x1(pooled, w, Some(b))?;
            tape.add_broadcast(m, g)
        }
        None => Ok(m),
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

/// Relaxed sample `sigmoid((m + g1 - g2) / tau)`.
pub fn gumbel_soft(m: f32, g1: f32, g2: f32, tau: f32) -> f32 {
    sigmoid((m as f64 + g1 as f64 - g2 as f64) / tau as f64) as f32
}

/// `-ln(-ln(u))` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f32 {
    let u = u.clamp(U_MIN, 1.0 - U_MIN);
    -libm::log(-libm::log(u)) as f32
}

/// One standard Gumbel sample.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    gumbel_from_uniform(rng.random::<f64>())
}

/// `g1 - g2` for `len` pixels, drawn in pixel order (g1 then g2 per pixel).
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let g1 = sample_gumbel(rng);
            let g2 = sample_gumbel(rng);
            g1 - g2
        })
        .collect()
}

/// Noise-free decision: execute iff the logit is strictly positive.
#[inline]
pub fn hard_decision(m: f32) -> bool {
    m > 0.0
}

/// Hard execution mask. With noise off this is a plain comparison per pixel.
pub fn gate_forward<R: Rng + ?Sized>(soft: &SoftMask, cfg: &GumbelConfig, rng: &mut R) -> BinaryMask {
    let (n, h, w) = soft.dims();
    let bits = if cfg.noise {
        soft.values()
            .iter()
            .map(|&m| {
                let d = sample_gumbel(rng) - sample_gumbel(rng);
                (m + d) / cfg.temperature > 0.0
            })
            .collect()
    } else {
        soft.values().iter().map(|&m| hard_decision(m)).collect()
    };
    BinaryMask { n, h, w, bits }
}

/// Records the straight-through gate on a tape; the output holds `{0, 1}`.
pub fn gate_traced<R: Rng + ?Sized>(tape: &mut Tape, m: Var, cfg: &GumbelConfig, rng: &mut R) -> Result<Var> {
    if cfg.noise {
        let noise = sample_noise(rng, tape.shape(m).numel());
        tape.straight_through(m, Some(&noise), cfg.temperature)
    } else {
        tape.straight_through(m, None, cfg.temperature)
    }
}

/// Linear temperature annealing between two epochs; constant outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f32,
    pub end: f32,
    pub start_epoch: usize,
    pub end_epoch: usize,
}

impl TemperatureSchedule {
    pub fn constant(tau: f32) -> Self {
        TemperatureSchedule {
            start: tau,
            end: tau,
            start_epoch: 0,
            end_epoch: 0,
        }
    }

    pub fn at(&self, epoch: usize) -> f32 {
        if epoch <= self.start_epoch || self.end_epoch <= self.start_epoch {
            return if epoch >= self.end_epoch { self.end } else { self.start };
        }
        if epoch >= self.end_epoch {
            return self.end;
        }
        let t = (epoch - self.start_epoch) as f32 / (self.end_epoch - self.start_epoch) as f32;
        self.start + (self.end - self.start) * t
    }
}

/// First epoch trained without Gumbel noise when the last `off_fraction` of
/// `epochs` is reserved for noise-free finetuning.
pub fn noise_off_epoch(epochs: usize, off_fraction: f32) -> usize {
    let off = libm::roundf(epochs as f32 * off_fraction.clamp(0.0, 1.0)) as usize;
    epochs - off.min(epochs)
}
