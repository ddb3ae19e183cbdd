//! Dense `(N, C, H, W)` tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Tensor dimensions in `(batch, channels, height, width)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of spatial positions in one plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    #[inline]
    pub const fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A contiguous `f32` tensor in `(N, C, H, W)` order.
///
/// A zero batch dimension is allowed so that an empty gather (`P = 0`) can be
/// represented; every other dimension is at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor4D {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor4D { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4D { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Contiguous `H*W` plane for `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape.plane();
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.shape.plane();
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor4D {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// `max |a - b| / max(max |b|, tiny)`; the yardstick for sparse/dense agreement.
    pub fn max_rel_diff(&self, reference: &Tensor4D) -> f32 {
        assert_eq!(self.shape, reference.shape, "max_rel_diff shape mismatch");
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        diff / reference.max_abs().max(f32::MIN_POSITIVE)
    }

    pub(crate) fn check_shape(&self, op: &'static str, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                op,
                expected,
                got: self.shape,
            });
        }
        Ok(())
    }
}

impl Index<(usize, usize, usize, usize)> for Tensor4D {
    type Output = f32;

    fn index(&self, (n, c, h, w): (usize, usize, usize, usize)) -> &f32 {
        &self.data[self.shape.offset(n, c, h, w)]
    }
}

impl IndexMut<(usize, usize, usize, usize)> for Tensor4D {
    fn index_mut(&mut self, (n, c, h, w): (usize, usize, usize, usize)) -> &mut f32 {
        let off = self.shape.offset(n, c, h, w);
        &mut self.data[off]
    }
}
