//! Masked gather/scatter execution.
//!
//! Active pixels of a mask are enumerated in flattened `(n, h, w)` order and
//! copied into a `P x C` row tensor. Pointwise layers run on the rows as-is;
//! the depthwise 3x3 convolution finds each row's spatial neighbours through
//! a precomputed table. Rows are written back with a scatter.

mod block;

pub(crate) use block::kaiming;
pub use block::{
    block_forward, BlockMode, BlockOutput, BlockParams, CompiledBlock, GatedBlockSpec, MaskSource,
    ResidualActivation, SparsePlan, TracedBlock,
};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gating::BinaryMask;
use crate::kernels::SENTINEL;
use crate::layers::DepthwiseParams;
use crate::tensor::{Shape, Tensor4D};

/// 3x3 morphological dilation, clipped at the image border.
pub fn dilate_mask(g: &BinaryMask) -> BinaryMask {
    let (n, h, w) = g.dims();
    let src = g.bits();
    // horizontal pass, then vertical pass
    let mut horiz = vec![false; src.len()];
    for row in 0..n * h {
        let r = &src[row * w..(row + 1) * w];
        let o = &mut horiz[row * w..(row + 1) * w];
        for x in 0..w {
            o[x] = r[x] || (x > 0 && r[x - 1]) || (x + 1 < w && r[x + 1]);
        }
    }
    let mut out = vec![false; src.len()];
    for b in 0..n {
        for y in 0..h {
            let o = (b * h + y) * w;
            for x in 0..w {
                let at = |yy: usize| horiz[(b * h + yy) * w + x];
                out[o + x] = at(y) || (y > 0 && at(y - 1)) || (y + 1 < h && at(y + 1));
            }
        }
    }
    BinaryMask::from_bits(n, h, w, out).expect("dilated mask shape")
}

/// Row index of a tap offset in [`GatherIndex::neighbors`]; `(dy, dx)` in `-1..=1`.
#[inline]
pub const fn tap(dy: isize, dx: isize) -> usize {
    ((dy + 1) * 3 + (dx + 1)) as usize
}

/// Bidirectional map between gathered rows and mask coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherIndex {
    n: usize,
    h: usize,
    w: usize,
    /// Flat mask offset `(n*h + y)*w + x` of each row.
    positions: Vec<u32>,
    /// Row of each flat mask offset, or [`SENTINEL`].
    inverse: Vec<u32>,
    /// Rows of the 3x3 neighbourhood in row-major tap order, or [`SENTINEL`]
    /// for taps that fall outside the image or outside the mask.
    neighbors: Vec<[u32; 9]>,
}

impl GatherIndex {
    pub fn build(g: &BinaryMask) -> Self {
        let (n, h, w) = g.dims();
        assert!(g.len() < SENTINEL as usize, "mask too large for 32-bit row indices");
        let mut positions = Vec::with_capacity(g.count());
        let mut inverse = vec![SENTINEL; g.len()];
        for (i, &b) in g.bits().iter().enumerate() {
            if b {
                inverse[i] = positions.len() as u32;
                positions.push(i as u32);
            }
        }
        let mut neighbors = Vec::with_capacity(positions.len());
        for &pos in &positions {
            let pos = pos as usize;
            let (y, x) = ((pos / w) % h, pos % w);
            let mut taps = [SENTINEL; 9];
            for dy in -1isize..=1 {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -1isize..=1 {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let q = (pos as isize + dy * w as isize + dx) as usize;
                    taps[tap(dy, dx)] = inverse[q];
                }
            }
            neighbors.push(taps);
        }
        GatherIndex {
            n,
            h,
            w,
            positions,
            inverse,
            neighbors,
        }
    }

    /// Number of gathered rows `P`.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn inverse(&self) -> &[u32] {
        &self.inverse
    }

    pub fn neighbors(&self) -> &[[u32; 9]] {
        &self.neighbors
    }

    /// Source coordinate `(n, h, w)` of row `p`.
    pub fn coord(&self, p: usize) -> (usize, usize, usize) {
        let pos = self.positions[p] as usize;
        (pos / (self.h * self.w), (pos / self.w) % self.h, pos % self.w)
    }

    /// Row holding `(n, h, w)`, if that position is gathered.
    pub fn row_of(&self, n: usize, h: usize, w: usize) -> Option<usize> {
        let r = self.inverse[(n * self.h + h) * self.w + w];
        (r != SENTINEL).then_some(r as usize)
    }

    fn check_input(&self, op: &'static str, x: Shape) -> Result<()> {
        if (x.n, x.h, x.w) != (self.n, self.h, self.w) {
            return Err(Error::ShapeMismatch {
                op,
                expected: Shape::new(self.n, x.c, self.h, self.w),
                got: x,
            });
        }
        Ok(())
    }
}

pub fn build_gather_index(g: &BinaryMask) -> GatherIndex {
    GatherIndex::build(g)
}

/// Copies `(n, :, h, w)` of every gathered position into row-major `P x C`.
pub(crate) fn gather_rows(x: &[f32], c: usize, hw: usize, positions: &[u32]) -> Vec<f32> {
    let mut out = vec![0.0f32; positions.len() * c];
    for (row, &pos) in out.chunks_exact_mut(c).zip(positions) {
        let pos = pos as usize;
        let (b, s) = (pos / hw, pos % hw);
        let base = b * c * hw + s;
        for (ch, v) in row.iter_mut().enumerate() {
            *v = x[base + ch * hw];
        }
    }
    out
}

/// Adds row `r` onto `(n, :, h, w)` of `out` for every position.
pub(crate) fn scatter_add_rows(out: &mut [f32], rows: &[f32], c: usize, hw: usize, positions: &[u32]) {
    for (row, &pos) in rows.chunks_exact(c).zip(positions) {
        let pos = pos as usize;
        let (b, s) = (pos / hw, pos % hw);
        let base = b * c * hw + s;
        for (ch, &v) in row.iter().enumerate() {
            out[base + ch * hw] += v;
        }
    }
}

/// Gathers the active positions of `x` into a `(P, C, 1, 1)` tensor.
pub fn gather(x: &Tensor4D, idx: &GatherIndex) -> Result<Tensor4D> {
    let s = x.shape();
    idx.check_input("gather", s)?;
    let rows = gather_rows(x.data(), s.c, s.plane(), &idx.positions);
    Tensor4D::from_vec(Shape::new(idx.len(), s.c, 1, 1), rows)
}

fn check_rows(op: &'static str, t: &Tensor4D, idx: &GatherIndex, c: usize) -> Result<()> {
    let ts = t.shape();
    if ts.n != idx.len() {
        return Err(Error::RowCount {
            op,
            expected: idx.len(),
            got: ts.n,
        });
    }
    if ts.c != c || ts.h != 1 || ts.w != 1 {
        return Err(Error::ShapeMismatch {
            op,
            expected: Shape::new(idx.len(), c, 1, 1),
            got: ts,
        });
    }
    Ok(())
}

/// Writes row `p` of `t` into position `p` of a copy of `base`.
pub fn scatter(t: &Tensor4D, idx: &GatherIndex, base: &Tensor4D) -> Result<Tensor4D> {
    let s = base.shape();
    idx.check_input("scatter", s)?;
    check_rows("scatter", t, idx, s.c)?;
    let mut out = base.clone();
    let hw = s.plane();
    for (row, &pos) in t.data().chunks_exact(s.c).zip(&idx.positions) {
        let pos = pos as usize;
        let (b, sp) = (pos / hw, pos % hw);
        for (ch, &v) in row.iter().enumerate() {
            out.data_mut()[(b * s.c + ch) * hw + sp] = v;
        }
    }
    Ok(out)
}

/// Adds row `p` of `t` onto position `p` of a copy of `base`.
pub fn scatter_add(t: &Tensor4D, idx: &GatherIndex, base: &Tensor4D) -> Result<Tensor4D> {
    let s = base.shape();
    idx.check_input("scatter_add", s)?;
    check_rows("scatter_add", t, idx, s.c)?;
    let mut out = base.clone();
    scatter_add_rows(out.data_mut(), t.data(), s.c, s.plane(), &idx.positions);
    Ok(out)
}

/// Depthwise kernel over gathered rows. `taps` is the tap-major `(9, c)`
/// kernel. Every in-image neighbour of an output row must be gathered.
pub(crate) fn depthwise_rows(
    t: &[f32],
    c: usize,
    idx: &GatherIndex,
    out_rows: &[u32],
    taps: &[f32],
    bias: Option<&[f32]>,
) -> Result<Vec<f32>> {
    let p_total = idx.len();
    let mut out = vec![0.0f32; out_rows.len() * c];
    for (acc, &p) in out.chunks_exact_mut(c).zip(out_rows) {
        let p = p as usize;
        if p >= p_total {
            return Err(Error::RowOutOfRange { row: p, rows: p_total });
        }
        let nb = &idx.neighbors[p];
        for (k, &q) in nb.iter().enumerate() {
            if q == SENTINEL {
                let (_, y, x) = idx.coord(p);
                let (yy, xx) = (y as isize + k as isize / 3 - 1, x as isize + k as isize % 3 - 1);
                if yy >= 0 && xx >= 0 && (yy as usize) < idx.h && (xx as usize) < idx.w {
                    return Err(Error::MissingNeighbor { row: p, tap: k });
                }
                continue;
            }
            let src = &t[q as usize * c..(q as usize + 1) * c];
            let wk = &taps[k * c..(k + 1) * c];
            for ((a, &v), &wv) in acc.iter_mut().zip(src).zip(wk) {
                *a += wv * v;
            }
        }
        if let Some(bias) = bias {
            for (a, &b) in acc.iter_mut().zip(bias) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// 3x3 depthwise convolution on rows gathered under `idx`, evaluated for the
/// rows listed in `out_rows`. Returns a `(|out_rows|, C, 1, 1)` tensor.
pub fn depthwise3x3_gathered(
    t: &Tensor4D,
    idx: &GatherIndex,
    out_rows: &[u32],
    p: &DepthwiseParams,
) -> Result<Tensor4D> {
    let c = p.channels();
    check_rows("depthwise3x3_gathered", t, idx, c)?;
    let out = depthwise_rows(t.data(), c, idx, out_rows, &p.taps_major(), p.bias_slice())?;
    Tensor4D::from_vec(Shape::new(out_rows.len(), c, 1, 1), out)
}

#[cfg(test)]
mod tests;
