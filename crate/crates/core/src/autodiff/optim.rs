use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor4D;

/// Update rule and its hyperparameters. Weight decay is coupled: it is added
/// to the gradient as an L2 term before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        momentum: f32,
        weight_decay: f32,
    },
    Adam {
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f32, weight_decay: f32) -> Self {
        OptimizerKind::Sgd {
            momentum,
            weight_decay,
        }
    }

    pub fn adam(weight_decay: f32) -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-parameter moment buffers. SGD only uses `first` (velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub state: OptimizerState,
}

impl Optimizer {
    /// `sizes` lists the element count of every parameter, in update order.
    pub fn new(kind: OptimizerKind, sizes: impl IntoIterator<Item = usize>) -> Self {
        let first: Vec<Vec<f32>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => first.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            state: OptimizerState {
                step: 0,
                first,
                second,
            },
        }
    }

    /// Applies one update. `grads[i]` is `None` for parameters that did not
    /// reach the loss; they are treated as having zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor4D], grads: &[Option<&Tensor4D>], lr: f32) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        assert_eq!(params.len(), self.state.first.len(), "optimizer built for a different parameter list");
        self.state.step += 1;
        let t = self.state.step as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let pd = p.data_mut();
            assert_eq!(pd.len(), self.state.first[i].len(), "parameter {i} changed size");
            match self.kind {
                OptimizerKind::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    let v = &mut self.state.first[i];
                    for (j, w) in pd.iter_mut().enumerate() {
                        let gj = g.map_or(0.0, |g| g.data()[j]) + weight_decay * *w;
                        v[j] = momentum * v[j] + gj;
                        *w -= lr * v[j];
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let bc1 = 1.0 - libm::powf(beta1, t as f32);
                    let bc2 = 1.0 - libm::powf(beta2, t as f32);
                    let m = &mut self.state.first[i];
                    let v = &mut self.state.second[i];
                    for (j, w) in pd.iter_mut().enumerate() {
                        let gj = g.map_or(0.0, |g| g.data()[j]) + weight_decay * *w;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= lr * mhat / (libm::sqrtf(vhat) + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(v: &[f32]) -> Tensor4D {
        Tensor4D::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::sgd(0.9, 0.0), OptimizerKind::adam(0.0)] {
            let mut p = param(&[1.0, -2.0, 3.0]);
            let g = param(&[0.0, 0.0, 0.0]);
            let mut opt = Optimizer::new(kind, [3]);
            for _ in 0..3 {
                opt.step(&mut [&mut p], &[Some(&g)], 0.1);
            }
            assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = param(&[0.5]);
        let g = param(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.0, 0.0), [1]);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        assert!((p.data()[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut p = param(&[1.0]);
        let g = param(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 5e-4), [1]);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        // v1 = 1 + 5e-4, w1 = 1 - 0.1 v1
        let w1 = 1.0 - 0.1 * 1.0005f32;
        assert!((p.data()[0] - w1).abs() < 1e-6);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        let v2 = 0.9 * 1.0005 + 1.0 + 5e-4 * w1;
        assert!((p.data()[0] - (w1 - 0.1 * v2)).abs() < 1e-6);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // mhat = g and vhat = g^2 after one step, so the update is lr * g / (|g| + eps).
        for g in [0.003f32, -2.5, 40.0] {
            let mut p = param(&[1.0]);
            let mut opt = Optimizer::new(OptimizerKind::adam(0.0), [1]);
            opt.step(&mut [&mut p], &[Some(&param(&[g]))], 2e-4);
            let delta = p.data()[0] - 1.0;
            assert!((delta.abs() - 2e-4).abs() < 1e-6, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn missing_gradient_counts_as_zero() {
        let mut p = param(&[2.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.0, 0.0), [1]);
        opt.step(&mut [&mut p], &[None], 1.0);
        assert_eq!(p.data(), &[2.0]);
    }
}
