//! Procedural glyph classification task.
//!
//! Each image is a noisy blank canvas with one 8x8 binary glyph pasted at a
//! random position; the label is the glyph id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dynconv_core::{Shape, Tensor4D};

pub const GLYPH_COUNT: usize = 8;
pub const GLYPH_SIZE: usize = 8;
pub const NOISE_STD: f32 = 0.1;

const GLYPHS: [[&str; GLYPH_SIZE]; GLYPH_COUNT] = [
    [
        "..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####..",
    ],
    [
        "...##...", "..###...", ".####...", "...##...", "...##...", "...##...", "...##...", ".######.",
    ],
    [
        "########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########",
    ],
    [
        "#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.", "#......#",
    ],
    [
        "...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##...",
    ],
    [
        "...#....", "..###...", ".#####..", "#######.", "........", "........", "........", "........",
    ],
    [
        "#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#",
    ],
    [
        "........", "........", "########", "........", "........", "########", "........", "........",
    ],
];

/// Whether pixel `(y, x)` of glyph `g` is set.
pub fn glyph_pixel(g: usize, y: usize, x: usize) -> bool {
    GLYPHS[g][y].as_bytes()[x] == b'#'
}

/// Tight bounding box of the set pixels of glyph `g`: `(y0, y1, x0, x1)`, inclusive.
pub fn glyph_extent(g: usize) -> (usize, usize, usize, usize) {
    let mut b = (GLYPH_SIZE, 0, GLYPH_SIZE, 0);
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            if glyph_pixel(g, y, x) {
                b = (b.0.min(y), b.1.max(y), b.2.min(x), b.3.max(x));
            }
        }
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSample {
    pub image: Vec<f32>,
    pub label: usize,
    /// Top-left corner of the pasted 8x8 cell.
    pub y: usize,
    pub x: usize,
}

impl GlyphSample {
    /// Glyph bounding box grown by `margin` and clipped to the canvas:
    /// `(y0, y1, x0, x1)`, inclusive.
    pub fn bbox(&self, margin: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (y0, y1, x0, x1) = glyph_extent(self.label);
        (
            (self.y + y0).saturating_sub(margin),
            (self.y + y1 + margin).min(height - 1),
            (self.x + x0).saturating_sub(margin),
            (self.x + x1 + margin).min(width - 1),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphDataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<GlyphSample>,
}

impl GlyphDataset {
    /// `n` samples with balanced labels in shuffled order.
    pub fn generate(n: usize, height: usize, width: usize, seed: u64) -> Self {
        assert!(height >= GLYPH_SIZE && width >= GLYPH_SIZE, "canvas smaller than a glyph");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
        let samples = (0..n)
            .map(|i| {
                let label = i % GLYPH_COUNT;
                let y = rng.random_range(0..=height - GLYPH_SIZE);
                let x = rng.random_range(0..=width - GLYPH_SIZE);
                let mut image: Vec<f32> = (0..height * width).map(|_| noise.sample(&mut rng)).collect();
                for gy in 0..GLYPH_SIZE {
                    for gx in 0..GLYPH_SIZE {
                        if glyph_pixel(label, gy, gx) {
                            image[(y + gy) * width + x + gx] += 1.0;
                        }
                    }
                }
                GlyphSample { image, label, y, x }
            })
            .collect::<Vec<_>>();
        let mut ds = GlyphDataset {
            height,
            width,
            samples,
        };
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        ds.samples = order.into_iter().map(|i| ds.samples[i].clone()).collect();
        ds
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images `(n, 1, h, w)` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4D, Vec<usize>) {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image);
            labels.push(self.samples[i].label);
        }
        let t = Tensor4D::from_vec(Shape::new(indices.len(), 1, self.height, self.width), data)
            .expect("batch shape");
        (t, labels)
    }
}
