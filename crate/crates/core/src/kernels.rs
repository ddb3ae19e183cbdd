//! Slice-level compute kernels shared by the dense layers, the tape and the
//! sparse executor.
//!
//! Every kernel accumulates in a fixed order: bias (or zero) first, then input
//! channels ascending for pointwise convolutions, then taps in row-major
//! `(ky, kx)` order for depthwise convolutions. The dense and the gathered
//! variants follow the same order per output element, so the two execution
//! paths produce bit-identical results.

use alloc::vec;
use alloc::vec::Vec;

/// Marks a neighbour tap that is out of the image or not in the gathered set.
pub const SENTINEL: u32 = u32::MAX;

const LANES: usize = 8;

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Sum with the same lane layout as [`dot`].
#[inline]
pub fn sum(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let r = ca.remainder();
    for x in ca {
        for i in 0..LANES {
            acc[i] += x[i];
        }
    }
    acc.iter().sum::<f32>() + r.iter().sum::<f32>()
}

/// Pointwise convolution over an `(n, cin, hw)` NCHW buffer.
pub fn conv1x1_nchw(
    x: &[f32],
    n: usize,
    cin: usize,
    hw: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
) -> Vec<f32> {
    debug_assert_eq!(x.len(), n * cin * hw);
    debug_assert_eq!(weight.len(), cout * cin);
    let mut out = vec![0.0f32; n * cout * hw];
    for b in 0..n {
        for co in 0..cout {
            let o = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            if let Some(bias) = bias {
                o.fill(bias[co]);
            }
            for ci in 0..cin {
                let a = weight[co * cin + ci];
                let xp = &x[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                for (o, &xv) in o.iter_mut().zip(xp) {
                    *o += a * xv;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1x1_nchw`] with respect to input, weight and bias.
pub fn conv1x1_nchw_backward(
    x: &[f32],
    grad_out: &[f32],
    n: usize,
    cin: usize,
    hw: usize,
    weight: &[f32],
    cout: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; n * cin * hw];
    let mut gw = vec![0.0f32; cout * cin];
    let mut gb = vec![0.0f32; cout];
    for b in 0..n {
        for co in 0..cout {
            let g = &grad_out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            gb[co] += sum(g);
            for ci in 0..cin {
                let xp = &x[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                gw[co * cin + ci] += dot(g, xp);
                let a = weight[co * cin + ci];
                let gxp = &mut gx[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                for (o, &gv) in gxp.iter_mut().zip(g) {
                    *o += a * gv;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Visits the valid `(out_row, in_row, x_lo, x_hi)` spans of one tap, where the
/// tap offset is `(dy, dx)` and output column `x` reads input column `x + dx`.
#[inline]
fn for_tap_rows(h: usize, w: usize, dy: isize, dx: isize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let x_lo = if dx < 0 { 1 } else { 0 };
    let x_hi = if dx > 0 { w.saturating_sub(1) } else { w };
    if x_lo >= x_hi {
        return;
    }
    for y in 0..h {
        let iy = y as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        f(y, iy as usize, x_lo, x_hi);
    }
}

/// 3x3 depthwise cross-correlation, stride 1, zero padding 1.
/// `kernel` is `(c, 9)` with taps in row-major order.
pub fn depthwise3x3_nchw(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let hw = h * w;
    debug_assert_eq!(x.len(), n * c * hw);
    debug_assert_eq!(kernel.len(), c * 9);
    let mut out = vec![0.0f32; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let xp = &x[base..base + hw];
            let o = &mut out[base..base + hw];
            for tap in 0..9 {
                let wv = kernel[ch * 9 + tap];
                let dy = (tap / 3) as isize - 1;
                let dx = (tap % 3) as isize - 1;
                for_tap_rows(h, w, dy, dx, |y, iy, lo, hi| {
                    let orow = &mut o[y * w + lo..y * w + hi];
                    let start = (iy * w + lo) as isize + dx;
                    let irow = &xp[start as usize..start as usize + (hi - lo)];
                    for (o, &xv) in orow.iter_mut().zip(irow) {
                        *o += wv * xv;
                    }
                });
            }
            if let Some(bias) = bias {
                for o in o.iter_mut() {
                    *o += bias[ch];
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise3x3_nchw`] with respect to input, kernel and bias.
pub fn depthwise3x3_nchw_backward(
    x: &[f32],
    grad_out: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hw = h * w;
    let mut gx = vec![0.0f32; n * c * hw];
    let mut gk = vec![0.0f32; c * 9];
    let mut gb = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let xp = &x[base..base + hw];
            let g = &grad_out[base..base + hw];
            gb[ch] += sum(g);
            let gxp = &mut gx[base..base + hw];
            for tap in 0..9 {
                let wv = kernel[ch * 9 + tap];
                let dy = (tap / 3) as isize - 1;
                let dx = (tap % 3) as isize - 1;
                let mut acc = 0.0f32;
                for_tap_rows(h, w, dy, dx, |y, iy, lo, hi| {
                    let grow = &g[y * w + lo..y * w + hi];
                    let start = ((iy * w + lo) as isize + dx) as usize;
                    let irow = &xp[start..start + (hi - lo)];
                    acc += dot(grow, irow);
                    let gxrow = &mut gxp[start..start + (hi - lo)];
                    for (o, &gv) in gxrow.iter_mut().zip(grow) {
                        *o += wv * gv;
                    }
                });
                gk[ch * 9 + tap] += acc;
            }
        }
    }
    (gx, gk, gb)
}

/// Per-channel batch mean and biased variance over `(n, h, w)`.
pub fn channel_stats(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let p = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            s += p.iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            let p = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            sq += p.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count) as f32;
    }
    (mean, var)
}

/// `y = x * scale[c] + shift[c]` over an NCHW buffer, in place.
pub fn channel_affine_nchw(x: &mut [f32], n: usize, c: usize, hw: usize, scale: &[f32], shift: &[f32]) {
    for b in 0..n {
        for ch in 0..c {
            let (s, t) = (scale[ch], shift[ch]);
            for v in &mut x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = *v * s + t;
            }
        }
    }
}

/// `y = x * scale[c] + shift[c]` over channel-contiguous rows, in place.
pub fn channel_affine_rows(x: &mut [f32], c: usize, scale: &[f32], shift: &[f32]) {
    for row in x.chunks_exact_mut(c) {
        for ((v, &s), &t) in row.iter_mut().zip(scale).zip(shift) {
            *v = *v * s + t;
        }
    }
}

#[inline]
pub fn relu6(v: f32) -> f32 {
    v.clamp(0.0, 6.0)
}

#[inline]
pub fn relu(v: f32) -> f32 {
    v.max(0.0)
}

/// Transposes a `(rows, cols)` matrix into `(cols, rows)`.
pub fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Pointwise convolution over channel-contiguous rows (`P x cin`).
/// `weight_t` is the transposed weight, `(cin, cout)`.
pub fn conv1x1_rows(
    t: &[f32],
    cin: usize,
    weight_t: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
) -> Vec<f32> {
    let rows = t.len() / cin;
    let mut out = vec![0.0f32; rows * cout];
    for (trow, orow) in t.chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
        if let Some(bias) = bias {
            orow.copy_from_slice(bias);
        }
        for (ci, &a) in trow.iter().enumerate() {
            let wrow = &weight_t[ci * cout..(ci + 1) * cout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += a * wv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_rows_cover_interior() {
        let mut spans = Vec::new();
        for_tap_rows(3, 4, -1, 1, |y, iy, lo, hi| spans.push((y, iy, lo, hi)));
        assert_eq!(spans, vec![(1, 0, 0, 3), (2, 1, 0, 3)]);
    }

    #[test]
    fn lane_sums_match_plain_sums() {
        let a: Vec<f32> = (0..29).map(|i| i as f32 * 0.5 - 3.0).collect();
        let b: Vec<f32> = (0..29).map(|i| (i % 5) as f32).collect();
        let plain: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), plain);
        assert_eq!(sum(&a), a.iter().sum::<f32>());
        assert_eq!(dot(&[], &[]), 0.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = transpose(&m, 2, 3);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(transpose(&t, 3, 2), m.to_vec());
    }

    #[test]
    fn channel_stats_two_values() {
        let (m, v) = channel_stats(&[1.0, 3.0], 2, 1, 1);
        assert_eq!(m, vec![2.0]);
        assert_eq!(v, vec![1.0]);
    }
}
