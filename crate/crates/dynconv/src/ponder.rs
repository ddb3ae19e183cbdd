//! Ponder-cost maps: per input pixel, the number of gated blocks that ran.

use std::fmt::Write as _;

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dynconv_core::gating::{BinaryMask, GumbelConfig};
use dynconv_core::model::{CompiledModel, MaskPolicy};
use dynconv_core::sparse::BlockMode;
use dynconv_core::Tensor4D;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PonderMap {
    pub height: usize,
    pub width: usize,
    /// Number of gated blocks, the largest possible value.
    pub blocks: usize,
    pub values: Vec<u32>,
}

impl PonderMap {
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.values[y * self.width + x]
    }

    pub fn total(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }

    /// Share of the total mass inside the inclusive box `(y0, y1, x0, x1)`.
    pub fn mass_fraction_in(&self, (y0, y1, x0, x1): (usize, usize, usize, usize)) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let mut inside = 0u64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                inside += self.get(y, x) as u64;
            }
        }
        inside as f64 / total as f64
    }

    /// Binary PGM (P5), `round(255 * value / blocks)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        let b = self.blocks.max(1) as f64;
        out.extend(self.values.iter().map(|&v| (255.0 * v as f64 / b).round() as u8));
        out
    }
}

/// Upscales each image's masks to `height x width` by nearest neighbour and sums them.
pub fn ponder_from_masks(masks: &[BinaryMask], height: usize, width: usize) -> Vec<PonderMap> {
    let n = masks.first().map_or(0, |m| m.dims().0);
    (0..n)
        .map(|b| {
            let mut values = vec![0u32; height * width];
            for m in masks {
                let (_, mh, mw) = m.dims();
                for y in 0..height {
                    let sy = y * mh / height;
                    for x in 0..width {
                        if m.get(b, sy, x * mw / width) {
                            values[y * width + x] += 1;
                        }
                    }
                }
            }
            PonderMap {
                height,
                width,
                blocks: masks.len(),
                values,
            }
        })
        .collect()
}

/// Noise-free masks of every gated block for a batch of images.
pub fn ponder_maps(cm: &CompiledModel, x: &Tensor4D, policy: MaskPolicy<'_>) -> Result<Vec<PonderMap>> {
    let out = cm.forward(
        x,
        &GumbelConfig::inference(),
        &mut ChaCha8Rng::seed_from_u64(0),
        BlockMode::Sparse,
        policy,
    )?;
    let s = x.shape();
    Ok(ponder_from_masks(&out.masks, s.h, s.w))
}

/// `image,row,col,value` rows for a list of maps, numbered from `first`.
pub fn ponder_csv(maps: &[PonderMap], first: usize) -> String {
    let mut s = String::from("image,row,col,value\n");
    for (i, m) in maps.iter().enumerate() {
        for y in 0..m.height {
            for x in 0..m.width {
                let _ = writeln!(s, "{},{},{},{}", first + i, y, x, m.get(y, x));
            }
        }
    }
    s
}
