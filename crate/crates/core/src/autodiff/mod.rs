//! Tape-based reverse-mode differentiation over [`Tensor4D`] values.
//!
//! Operations are recorded in execution order, so the tape is acyclic by
//! construction and [`Tape::backward`] is a single reverse sweep. Only
//! first-order gradients are supported.

mod optim;

pub use optim::{Optimizer, OptimizerKind, OptimizerState};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Shape, Tensor4D};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    Depthwise { x: Var, w: Var, b: Option<Var> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32> },
    Relu6(Var),
    Relu(Var),
    Add(Var, Var),
    MulSpatial { f: Var, g: Var },
    AddBroadcast { a: Var, b: Var },
    StraightThrough { m: Var, soft: Vec<f32>, tau: f32 },
    GlobalAvgPool(Var),
    AvgPool2(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    Sum(Var),
    Scale(Var, f32),
    Offset(Var),
    Square(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor4D,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4D>>,
}

impl Gradients {
    /// `None` when the value does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor4D> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of `shape` when the value was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor4D {
        self.get(v).cloned().unwrap_or_else(|| Tensor4D::zeros(shape))
    }
}

fn shape_err(op: &'static str, expected: Shape, got: Shape) -> Error {
    Error::ShapeMismatch { op, expected, got }
}

fn accumulate(slot: &mut Option<Tensor4D>, shape: Shape, g: &[f32]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor4D::from_vec(shape, g.to_vec()).expect("gradient shape")),
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-v))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4D {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor4D, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are tracked through it.
    pub fn param(&mut self, value: Tensor4D) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf (inputs, fixed buffers).
    pub fn constant(&mut self, value: Tensor4D) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.h != 1 || ws.w != 1 || ws.c != xs.c {
            return Err(shape_err("conv1x1 weight", Shape::new(ws.n, xs.c, 1, 1), ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(shape_err("conv1x1 bias", Shape::new(1, ws.n, 1, 1), bs));
            }
        }
        let out = kernels::conv1x1_nchw(
            self.value(x).data(),
            xs.n,
            xs.c,
            xs.plane(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            ws.n,
        );
        let value = Tensor4D::from_vec(Shape::new(xs.n, ws.n, xs.h, xs.w), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv1x1 { x, w, b }, &inputs))
    }

    pub fn depthwise3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws != Shape::new(xs.c, 1, 3, 3) {
            return Err(shape_err("depthwise weight", Shape::new(xs.c, 1, 3, 3), ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape::new(1, xs.c, 1, 1) {
                return Err(shape_err("depthwise bias", Shape::new(1, xs.c, 1, 1), bs));
            }
        }
        let out = kernels::depthwise3x3_nchw(
            self.value(x).data(),
            xs.n,
            xs.c,
            xs.h,
            xs.w,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor4D::from_vec(xs, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Depthwise { x, w, b }, &inputs))
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<Shape> {
        let xs = self.shape(x);
        let cs = Shape::new(1, xs.c, 1, 1);
        if self.shape(gamma) != cs {
            return Err(shape_err("batchnorm gamma", cs, self.shape(gamma)));
        }
        if self.shape(beta) != cs {
            return Err(shape_err("batchnorm beta", cs, self.shape(beta)));
        }
        Ok(xs)
    }

    /// Batch norm with batch statistics. Returns the output together with the
    /// batch mean and biased variance so the caller can update running stats.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let xs = self.check_affine(x, gamma, beta)?;
        let hw = xs.plane();
        let (mean, var) = kernels::channel_stats(self.value(x).data(), xs.n, xs.c, hw);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / libm::sqrtf(v + eps)).collect();
        let mut xhat = self.value(x).data().to_vec();
        let shift: Vec<f32> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        kernels::channel_affine_nchw(&mut xhat, xs.n, xs.c, hw, &inv_std, &shift);
        let mut out = xhat.clone();
        kernels::channel_affine_nchw(
            &mut out,
            xs.n,
            xs.c,
            hw,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor4D::from_vec(xs, out)?;
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let xs = self.check_affine(x, gamma, beta)?;
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / libm::sqrtf(v + eps)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        // Same folded form as `BatchNormParams::fold`, so eval-mode traces match
        // the inference kernels bit for bit.
        let scale: Vec<f32> = (0..xs.c).map(|c| g[c] / libm::sqrtf(var[c] + eps)).collect();
        let shift: Vec<f32> = (0..xs.c).map(|c| b[c] - mean[c] * scale[c]).collect();
        let mut out = self.value(x).data().to_vec();
        kernels::channel_affine_nchw(&mut out, xs.n, xs.c, xs.plane(), &scale, &shift);
        let value = Tensor4D::from_vec(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::relu6);
        self.push(value, Op::Relu6(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::relu);
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::layers::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `f * g` with `g` of shape `(n, 1, h, w)` broadcast over the channels of `f`.
    pub fn mul_spatial(&mut self, f: Var, g: Var) -> Result<Var> {
        let (fs, gs) = (self.shape(f), self.shape(g));
        let expect = Shape::new(fs.n, 1, fs.h, fs.w);
        if gs != expect {
            return Err(shape_err("mul_spatial mask", expect, gs));
        }
        let hw = fs.plane();
        let mut out = self.value(f).data().to_vec();
        let gd = self.value(g).data();
        for n in 0..fs.n {
            let gp = &gd[n * hw..(n + 1) * hw];
            for c in 0..fs.c {
                let o = &mut out[(n * fs.c + c) * hw..(n * fs.c + c + 1) * hw];
                for (o, &m) in o.iter_mut().zip(gp) {
                    *o *= m;
                }
            }
        }
        let value = Tensor4D::from_vec(fs, out)?;
        Ok(self.push(value, Op::MulSpatial { f, g }, &[f, g]))
    }

    /// `a + b` with `b` of shape `(n, c, 1, 1)` broadcast over the plane of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let expect = Shape::new(as_.n, as_.c, 1, 1);
        if bs != expect {
            return Err(shape_err("add_broadcast", expect, bs));
        }
        let hw = as_.plane();
        let mut out = self.value(a).data().to_vec();
        for (plane, &bv) in out.chunks_exact_mut(hw).zip(self.value(b).data()) {
            for o in plane {
                *o += bv;
            }
        }
        let value = Tensor4D::from_vec(as_, out)?;
        Ok(self.push(value, Op::AddBroadcast { a, b }, &[a, b]))
    }

    /// Hard decision `[(m + noise) / tau > 0]` forward; backward behaves as the
    /// soft sample `sigmoid((m + noise) / tau)` with the same noise.
    pub fn straight_through(&mut self, m: Var, noise: Option<&[f32]>, tau: f32) -> Result<Var> {
        let ms = self.shape(m);
        if let Some(noise) = noise {
            if noise.len() != ms.numel() {
                return Err(Error::DataLength {
                    shape: ms,
                    len: noise.len(),
                });
            }
        }
        let logits = self.value(m).data();
        let mut hard = Vec::with_capacity(logits.len());
        let mut soft = Vec::with_capacity(logits.len());
        for (i, &l) in logits.iter().enumerate() {
            let a = match noise {
                Some(d) => (l + d[i]) / tau,
                None => l / tau,
            };
            hard.push(if a > 0.0 { 1.0 } else { 0.0 });
            soft.push(sigmoid(a));
        }
        let value = Tensor4D::from_vec(ms, hard)?;
        Ok(self.push(value, Op::StraightThrough { m, soft, tau }, &[m]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let hw = xs.plane() as f32;
        let data = self
            .value(x)
            .data()
            .chunks_exact(xs.plane())
            .map(|p| kernels::sum(p) / hw)
            .collect();
        let value = Tensor4D::from_vec(Shape::new(xs.n, xs.c, 1, 1), data).expect("pool shape");
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// 2x2 average pooling with stride 2. Height and width must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let value = avg_pool2(self.value(x))?;
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    /// Mean softmax cross-entropy of `(n, k, 1, 1)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.h != 1 || ls.w != 1 || labels.len() != ls.n {
            return Err(shape_err("cross-entropy logits", Shape::new(labels.len(), ls.c, 1, 1), ls));
        }
        if labels.iter().any(|&l| l >= ls.c) {
            return Err(Error::Config("label out of range"));
        }
        let probs = softmax_rows(self.value(logits).data(), ls.c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -libm::log(probs[i * ls.c + l].max(f32::MIN_POSITIVE) as f64))
            .sum::<f64>()
            / ls.n as f64;
        let value = Tensor4D::scalar(loss as f32);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        self.push(Tensor4D::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k), &[x])
    }

    /// `x + k` elementwise.
    pub fn offset(&mut self, x: Var, k: f32) -> Var {
        let value = self.value(x).map(|v| v + k);
        self.push(value, Op::Offset(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor4D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4D::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor4D, grads: &mut [Option<Tensor4D>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x1 { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (gx, gw, gb) = kernels::conv1x1_nchw_backward(
                    self.value(*x).data(),
                    g,
                    xs.n,
                    xs.c,
                    xs.plane(),
                    self.value(*w).data(),
                    ws.n,
                );
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xs, &gx);
                }
                accumulate(&mut grads[w.0], ws, &gw);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], self.shape(*b), &gb);
                }
            }
            Op::Depthwise { x, w, b } => {
                let xs = self.shape(*x);
                let (gx, gw, gb) = kernels::depthwise3x3_nchw_backward(
                    self.value(*x).data(),
                    g,
                    xs.n,
                    xs.c,
                    xs.h,
                    xs.w,
                    self.value(*w).data(),
                );
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xs, &gx);
                }
                accumulate(&mut grads[w.0], self.shape(*w), &gw);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], self.shape(*b), &gb);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let hw = xs.plane();
                let count = (xs.n * hw) as f32;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; xs.c];
                let mut dbeta = vec![0.0f32; xs.c];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let r = (n * xs.c + c) * hw..(n * xs.c + c + 1) * hw;
                        dbeta[c] += kernels::sum(&g[r.clone()]);
                        dgamma[c] += kernels::dot(&g[r.clone()], &xhat[r]);
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0f32; xs.numel()];
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            let k = gam[c] * inv_std[c] / count;
                            let r = (n * xs.c + c) * hw..(n * xs.c + c + 1) * hw;
                            for ((o, &gv), &xh) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = k * (count * gv - dbeta[c] - xh * dgamma[c]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], xs, &gx);
                }
                let cs = Shape::new(1, xs.c, 1, 1);
                accumulate(&mut grads[gamma.0], cs, &dgamma);
                accumulate(&mut grads[beta.0], cs, &dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let hw = xs.plane();
                let gam = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let mut dgamma = vec![0.0f32; xs.c];
                let mut dbeta = vec![0.0f32; xs.c];
                let mut gx = vec![0.0f32; xs.numel()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let r = (n * xs.c + c) * hw..(n * xs.c + c + 1) * hw;
                        for ((o, &gv), &xi) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
                            dbeta[c] += gv;
                            dgamma[c] += gv * (xi - mean[c]) * inv_std[c];
                            *o = gv * gam[c] * inv_std[c];
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xs, &gx);
                }
                let cs = Shape::new(1, xs.c, 1, 1);
                accumulate(&mut grads[gamma.0], cs, &dgamma);
                accumulate(&mut grads[beta.0], cs, &dbeta);
            }
            Op::Relu6(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f32> = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > 0.0 && v < 6.0 { g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], self.shape(*x), &gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f32> = g.iter().zip(xv).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                accumulate(&mut grads[x.0], self.shape(*x), &gx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gy.shape(), g);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gy.shape(), g);
                }
            }
            Op::MulSpatial { f, g: mask } => {
                let fs = self.shape(*f);
                let hw = fs.plane();
                let fv = self.value(*f).data();
                let mv = self.value(*mask).data();
                if self.wants(*f) {
                    let mut gf = g.to_vec();
                    for n in 0..fs.n {
                        let mp = &mv[n * hw..(n + 1) * hw];
                        for c in 0..fs.c {
                            for (o, &m) in gf[(n * fs.c + c) * hw..(n * fs.c + c + 1) * hw].iter_mut().zip(mp) {
                                *o *= m;
                            }
                        }
                    }
                    accumulate(&mut grads[f.0], fs, &gf);
                }
                if self.wants(*mask) {
                    let mut gm = vec![0.0f32; fs.n * hw];
                    for n in 0..fs.n {
                        for c in 0..fs.c {
                            let r = (n * fs.c + c) * hw..(n * fs.c + c + 1) * hw;
                            for ((o, &gv), &fvv) in gm[n * hw..(n + 1) * hw].iter_mut().zip(&g[r.clone()]).zip(&fv[r]) {
                                *o += gv * fvv;
                            }
                        }
                    }
                    accumulate(&mut grads[mask.0], self.shape(*mask), &gm);
                }
            }
            Op::AddBroadcast { a, b } => {
                let as_ = self.shape(*a);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], as_, g);
                }
                if self.wants(*b) {
                    let gb: Vec<f32> = g.chunks_exact(as_.plane()).map(|p| p.iter().sum()).collect();
                    accumulate(&mut grads[b.0], self.shape(*b), &gb);
                }
            }
            Op::StraightThrough { m, soft, tau } => {
                let gm: Vec<f32> = g
                    .iter()
                    .zip(soft)
                    .map(|(&g, &y)| g * y * (1.0 - y) / tau)
                    .collect();
                accumulate(&mut grads[m.0], self.shape(*m), &gm);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs.plane();
                let mut gx = vec![0.0f32; xs.numel()];
                for (plane, &gv) in gx.chunks_exact_mut(hw).zip(g) {
                    plane.fill(gv / hw as f32);
                }
                accumulate(&mut grads[x.0], xs, &gx);
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (oh, ow) = (xs.h / 2, xs.w / 2);
                let mut gx = vec![0.0f32; xs.numel()];
                for nc in 0..xs.n * xs.c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g[(nc * oh + y) * ow + xx];
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gx[(nc * xs.h + 2 * y + dy) * xs.w + 2 * xx + dx] = gv;
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], xs, &gx);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let ls = self.shape(*logits);
                let k = g[0] / ls.n as f32;
                let mut gl: Vec<f32> = probs.iter().map(|p| p * k).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * ls.c + l] -= k;
                }
                accumulate(&mut grads[logits.0], ls, &gl);
            }
            Op::Sum(x) => {
                let xs = self.shape(*x);
                accumulate(&mut grads[x.0], xs, &vec![g[0]; xs.numel()]);
            }
            Op::Scale(x, k) => {
                let gx: Vec<f32> = g.iter().map(|v| v * k).collect();
                accumulate(&mut grads[x.0], self.shape(*x), &gx);
            }
            Op::Offset(x) => accumulate(&mut grads[x.0], self.shape(*x), g),
            Op::Square(x) => {
                let gx: Vec<f32> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| 2.0 * g * v)
                    .collect();
                accumulate(&mut grads[x.0], self.shape(*x), &gx);
            }
        }
    }
}

/// Row-wise softmax over `k`-wide rows.
pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f32> = row.iter().map(|&v| libm::expf(v - max)).collect();
        let total: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor4D) -> Result<Tensor4D> {
    let xs = x.shape();
    if xs.h % 2 != 0 || xs.w % 2 != 0 {
        return Err(Error::Config("avg_pool2 needs even height and width"));
    }
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(xs.n * xs.c * oh * ow);
    for nc in 0..xs.n * xs.c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| xd[(nc * xs.h + 2 * y + dy) * xs.w + 2 * xx + dx];
                out.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
    }
    Tensor4D::from_vec(Shape::new(xs.n, xs.c, oh, ow), out)
}

#[cfg(test)]
mod tests;
