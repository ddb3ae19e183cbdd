//! Block throughput and per-component timings.
//!
//! Components of the sparse path: `mask` is the mask unit, `bookkeeping` is
//! thresholding plus dilation and index construction, `gather`, `residual`
//! (expansion, depthwise and projection on gathered rows) and `scatter`
//! (copy of the input, scatter-add, residual activation).

use std::hint::black_box;
use std::time::Instant;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynconv_core::budget::{flops_dense, flops_sparse};
use dynconv_core::gating::{gate_forward, BinaryMask, GumbelConfig};
use dynconv_core::sparse::{BlockParams, GatedBlockSpec};
use dynconv_core::{Shape, Tensor4D};

use crate::config::BenchConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub density: f64,
    /// Measured fraction of active pixels.
    pub active_fraction: f64,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    pub mask_ms: f64,
    pub bookkeeping_ms: f64,
    pub gather_ms: f64,
    pub residual_ms: f64,
    pub scatter_ms: f64,
    pub dense_ips: f64,
    pub sparse_ips: f64,
    /// Per-image MACs of the dense block.
    pub dense_macs: f64,
    /// Per-image MACs executed by the sparse residual function.
    pub sparse_macs: f64,
    /// Per-image MACs from the cost formula on the same mask.
    pub formula_macs: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.dense_ms / self.sparse_ms
    }

    /// Share of the sparse time not spent in the residual function.
    pub fn overhead_fraction(&self) -> f64 {
        (self.mask_ms + self.bookkeeping_ms + self.gather_ms + self.scatter_ms) / self.sparse_ms
    }
}

/// Spatially coherent mask: per image, the `round(density * h * w)` largest
/// values of a box-blurred uniform noise field.
pub fn blob_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, h: usize, w: usize, density: f64) -> BinaryMask {
    let k = (density.clamp(0.0, 1.0) * (h * w) as f64).round() as usize;
    let radius = 2isize;
    let mut mask = BinaryMask::empty(n, h, w);
    for b in 0..n {
        let noise: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
        let mut blurred: Vec<(f32, usize)> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                let mut s = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += noise[yy as usize * w + xx as usize];
                        }
                    }
                }
                (s, i)
            })
            .collect();
        blurred.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &blurred[..k] {
            mask.set(b, i / w, i % w, true);
        }
    }
    mask
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times one gated block with random weights at each configured density.
/// Every figure is the median over `runs` of a mean over `repeats` calls,
/// measured after `warmup` untimed calls.
pub fn bench_block(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GatedBlockSpec {
        expansion_channels: cfg.expansion_channels,
        ..GatedBlockSpec::inverted_residual(cfg.channels, 1)
    };
    let params = BlockParams::init(spec, &mut rng)?;
    let cb = params.compile();
    let shape = Shape::new(cfg.batch, cfg.channels, cfg.height, cfg.width);
    let x = Tensor4D::from_fn(shape, |_, _, _, _| rng.random_range(-1.0f32..1.0));
    let gumbel = GumbelConfig::inference();
    let batch = cfg.batch as f64;
    let dense_macs = flops_dense(&spec, cfg.height, cfg.width) as f64;

    let mut rows = Vec::with_capacity(cfg.densities.len());
    for &density in &cfg.densities {
        let mask = blob_mask(&mut rng, cfg.batch, cfg.height, cfg.width, density);
        let plan = cb.plan(mask.clone());
        let sparse_macs = cb.sparse_macs(&plan) as f64 / batch;
        let formula_macs =
            flops_sparse(&spec, mask.count() as u64, plan.dilated.count() as u64) as f64 / batch;

        let run_sparse = |times: Option<&mut [f64; 6]>| -> Result<()> {
            let t_all = Instant::now();
            let t = Instant::now();
            let logits = cb.mask_logits(&x)?.expect("gated block");
            let t_mask = ms(t);
            let t = Instant::now();
            // The thresholded mask is computed for timing; execution uses `mask`.
            black_box(gate_forward(&logits, &gumbel, &mut ChaCha8Rng::seed_from_u64(0)));
            let plan = cb.plan(mask.clone());
            let t_book = ms(t);
            let t = Instant::now();
            let g = cb.gather(&x, &plan)?;
            let t_gather = ms(t);
            let t = Instant::now();
            let r = cb.residual_rows(&g, &plan)?;
            let t_res = ms(t);
            let t = Instant::now();
            let out = cb.scatter(&x, &r, &plan)?;
            let t_scatter = ms(t);
            black_box(out);
            let total = ms(t_all);
            if let Some(acc) = times {
                for (a, v) in acc.iter_mut().zip([total, t_mask, t_book, t_gather, t_res, t_scatter]) {
                    *a += v;
                }
            }
            Ok(())
        };
        for _ in 0..cfg.warmup {
            black_box(cb.forward_dense(&x, None)?);
            run_sparse(None)?;
        }
        let mut dense_runs = Vec::with_capacity(cfg.runs);
        let mut sparse_runs: Vec<[f64; 6]> = Vec::with_capacity(cfg.runs);
        for _ in 0..cfg.runs {
            let t = Instant::now();
            for _ in 0..cfg.repeats {
                black_box(cb.forward_dense(&x, None)?);
            }
            dense_runs.push(ms(t) / cfg.repeats as f64);
            let mut acc = [0.0f64; 6];
            for _ in 0..cfg.repeats {
                run_sparse(Some(&mut acc))?;
            }
            sparse_runs.push(acc.map(|v| v / cfg.repeats as f64));
        }
        let col = |i: usize| median(sparse_runs.iter().map(|r| r[i]).collect());
        let dense_ms = median(dense_runs);
        let sparse_ms = col(0);
        rows.push(BenchRow {
            density,
            active_fraction: mask.density(),
            dense_ms,
            sparse_ms,
            mask_ms: col(1),
            bookkeeping_ms: col(2),
            gather_ms: col(3),
            residual_ms: col(4),
            scatter_ms: col(5),
            dense_ips: batch / (dense_ms * 1e-3),
            sparse_ips: batch / (sparse_ms * 1e-3),
            dense_macs,
            sparse_macs,
            formula_macs,
        });
    }
    Ok(rows)
}
