//! Dense layer parameters and reference operations.
//!
//! Convolutions are cross-correlations with stride 1; the depthwise kernel is
//! zero padded so the output keeps the input resolution.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Shape, Tensor4D};

/// Default batch-norm epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Default running-statistics momentum.
pub const BN_MOMENTUM: f32 = 0.1;

/// Pointwise convolution weights, `(c_out, c_in, 1, 1)`, and optional bias `(1, c_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1Params {
    pub weight: Tensor4D,
    pub bias: Option<Tensor4D>,
}

impl Conv1x1Params {
    pub fn new(weight: Tensor4D, bias: Option<Tensor4D>) -> Result<Self> {
        let s = weight.shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::Config("pointwise weight must be (c_out, c_in, 1, 1)"));
        }
        if let Some(b) = &bias {
            b.check_shape("conv1x1 bias", Shape::new(1, s.n, 1, 1))?;
        }
        Ok(Conv1x1Params { weight, bias })
    }

    pub fn zeros(c_in: usize, c_out: usize, with_bias: bool) -> Self {
        Conv1x1Params {
            weight: Tensor4D::zeros(Shape::new(c_out, c_in, 1, 1)),
            bias: with_bias.then(|| Tensor4D::zeros(Shape::new(1, c_out, 1, 1))),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn bias_slice(&self) -> Option<&[f32]> {
        self.bias.as_ref().map(Tensor4D::data)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor4D::len)
    }
}

/// Depthwise 3x3 weights, `(c, 1, 3, 3)`, and optional bias `(1, c, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseParams {
    pub weight: Tensor4D,
    pub bias: Option<Tensor4D>,
}

impl DepthwiseParams {
    pub fn new(weight: Tensor4D, bias: Option<Tensor4D>) -> Result<Self> {
        let s = weight.shape();
        if s.c != 1 || s.h != 3 || s.w != 3 {
            return Err(Error::Config("depthwise weight must be (c, 1, 3, 3)"));
        }
        if let Some(b) = &bias {
            b.check_shape("depthwise bias", Shape::new(1, s.n, 1, 1))?;
        }
        Ok(DepthwiseParams { weight, bias })
    }

    pub fn zeros(channels: usize, with_bias: bool) -> Self {
        DepthwiseParams {
            weight: Tensor4D::zeros(Shape::new(channels, 1, 3, 3)),
            bias: with_bias.then(|| Tensor4D::zeros(Shape::new(1, channels, 1, 1))),
        }
    }

    /// Kernel whose centre tap is one: the identity map.
    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels, false);
        for c in 0..channels {
            p.weight[(c, 0, 1, 1)] = 1.0;
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn bias_slice(&self) -> Option<&[f32]> {
        self.bias.as_ref().map(Tensor4D::data)
    }

    /// Kernel re-laid out tap-major, `(9, c)`, for the gathered kernel.
    pub fn taps_major(&self) -> Vec<f32> {
        kernels::transpose(self.weight.data(), self.channels(), 9)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor4D::len)
    }
}

/// Batch normalisation: learned affine `(1, c, 1, 1)` plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor4D,
    pub beta: Tensor4D,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    /// Identity-initialised statistics: gamma 1, beta 0, mean 0, var 1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor4D::full(Shape::new(1, channels, 1, 1), 1.0),
            beta: Tensor4D::zeros(Shape::new(1, channels, 1, 1)),
            running_mean: alloc::vec![0.0; channels],
            running_var: alloc::vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    /// Inference statistics folded into a per-channel `(scale, shift)`.
    pub fn fold(&self) -> (Vec<f32>, Vec<f32>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let s = self.gamma.data()[c] / libm::sqrtf(self.running_var[c] + self.eps);
            scale.push(s);
            shift.push(self.beta.data()[c] - self.running_mean[c] * s);
        }
        (scale, shift)
    }

    /// Blends batch statistics into the running estimates. `batch_var` is the
    /// biased variance over `count` samples; the running value stores the
    /// unbiased one.
    pub fn update_running(&mut self, batch_mean: &[f32], batch_var: &[f32], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            count as f32 / (count - 1) as f32
        } else {
            1.0
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * batch_var[c] * unbias;
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels()
    }
}

pub fn conv1x1(x: &Tensor4D, p: &Conv1x1Params) -> Result<Tensor4D> {
    let s = x.shape();
    if s.c != p.c_in() {
        return Err(Error::ChannelMismatch {
            op: "conv1x1",
            expected: p.c_in(),
            got: s.c,
        });
    }
    let out = kernels::conv1x1_nchw(
        x.data(),
        s.n,
        s.c,
        s.plane(),
        p.weight.data(),
        p.bias_slice(),
        p.c_out(),
    );
    Tensor4D::from_vec(Shape::new(s.n, p.c_out(), s.h, s.w), out)
}

pub fn depthwise3x3_dense(x: &Tensor4D, p: &DepthwiseParams) -> Result<Tensor4D> {
    let s = x.shape();
    if s.c != p.channels() {
        return Err(Error::ChannelMismatch {
            op: "depthwise3x3",
            expected: p.channels(),
            got: s.c,
        });
    }
    let out = kernels::depthwise3x3_nchw(x.data(), s.n, s.c, s.h, s.w, p.weight.data(), p.bias_slice());
    Tensor4D::from_vec(s, out)
}

/// Batch normalisation. Training mode normalises with batch statistics and
/// updates the running estimates; inference mode uses the running estimates.
pub fn batchnorm(x: &Tensor4D, p: &mut BatchNormParams, training: bool) -> Result<Tensor4D> {
    let s = x.shape();
    if s.c != p.channels() {
        return Err(Error::ChannelMismatch {
            op: "batchnorm",
            expected: p.channels(),
            got: s.c,
        });
    }
    if !training {
        return batchnorm_inference(x, p);
    }
    let (mean, var) = kernels::channel_stats(x.data(), s.n, s.c, s.plane());
    let mut scale = Vec::with_capacity(s.c);
    let mut shift = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let inv = 1.0 / libm::sqrtf(var[c] + p.eps);
        scale.push(p.gamma.data()[c] * inv);
        shift.push(p.beta.data()[c] - mean[c] * p.gamma.data()[c] * inv);
    }
    let mut out = x.clone();
    kernels::channel_affine_nchw(out.data_mut(), s.n, s.c, s.plane(), &scale, &shift);
    p.update_running(&mean, &var, s.n * s.plane());
    Ok(out)
}

pub fn batchnorm_inference(x: &Tensor4D, p: &BatchNormParams) -> Result<Tensor4D> {
    let s = x.shape();
    if s.c != p.channels() {
        return Err(Error::ChannelMismatch {
            op: "batchnorm",
            expected: p.channels(),
            got: s.c,
        });
    }
    let (scale, shift) = p.fold();
    let mut out = x.clone();
    kernels::channel_affine_nchw(out.data_mut(), s.n, s.c, s.plane(), &scale, &shift);
    Ok(out)
}

pub fn relu6(x: &Tensor4D) -> Tensor4D {
    x.map(kernels::relu6)
}

pub fn relu(x: &Tensor4D) -> Tensor4D {
    x.map(kernels::relu)
}

pub fn add(a: &Tensor4D, b: &Tensor4D) -> Result<Tensor4D> {
    b.check_shape("add", a.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4D::from_vec(a.shape(), data)
}
