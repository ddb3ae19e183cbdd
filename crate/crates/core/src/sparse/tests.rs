use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::gating::{GumbelConfig, MaskUnitKind};
use crate::layers::{self, BatchNormParams};

fn mask_from(n: usize, h: usize, w: usize, on: &[(usize, usize, usize)]) -> BinaryMask {
    let mut m = BinaryMask::empty(n, h, w);
    for &(b, y, x) in on {
        m.set(b, y, x, true);
    }
    m
}

fn random_mask<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(n, h, w, |_, _, _| rng.random::<f64>() < density)
}

fn random_tensor<R: Rng>(rng: &mut R, shape: Shape) -> Tensor4D {
    Tensor4D::from_fn(shape, |_, _, _, _| rng.random_range(-1.0f32..1.0))
}

// Brute-force dilation straight from the definition.
fn dilate_oracle(g: &BinaryMask) -> BinaryMask {
    let (n, h, w) = g.dims();
    BinaryMask::from_fn(n, h, w, |b, y, x| {
        let mut hit = false;
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                hit |= g.get(b, yy, xx);
            }
        }
        hit
    })
}

fn randomize_bn<R: Rng>(rng: &mut R, bn: &mut BatchNormParams) {
    let c = bn.channels();
    bn.gamma = Tensor4D::from_fn(Shape::new(1, c, 1, 1), |_, _, _, _| rng.random_range(0.5f32..1.5));
    bn.beta = Tensor4D::from_fn(Shape::new(1, c, 1, 1), |_, _, _, _| rng.random_range(-0.5f32..0.5));
    bn.running_mean = (0..c).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    bn.running_var = (0..c).map(|_| rng.random_range(0.5f32..2.0)).collect();
}

fn random_block<R: Rng>(rng: &mut R, c: usize, ce: usize, residual: ResidualActivation) -> BlockParams {
    let spec = GatedBlockSpec {
        channels: c,
        expansion_channels: ce,
        out_channels: c,
        mask_unit: MaskUnitKind::Squeeze,
        gated: true,
        residual,
    };
    let mut p = BlockParams::init(spec, rng).unwrap();
    for bn in p.bn_mut() {
        randomize_bn(rng, bn);
    }
    p
}

// Block written with the layer functions, no folding and no transposes.
fn block_oracle(p: &BlockParams, x: &Tensor4D, mask: &BinaryMask) -> Tensor4D {
    let e = layers::conv1x1(x, &p.expand).unwrap();
    let e = layers::relu6(&layers::batchnorm_inference(&e, &p.bn1).unwrap());
    let d = layers::depthwise3x3_dense(&e, &p.depthwise).unwrap();
    let d = layers::relu6(&layers::batchnorm_inference(&d, &p.bn2).unwrap());
    let f = layers::conv1x1(&d, &p.project).unwrap();
    let f = layers::batchnorm_inference(&f, &p.bn3).unwrap();
    let s = x.shape();
    let mut out = Tensor4D::from_fn(s, |b, ch, y, xx| {
        let g = if mask.get(b, y, xx) { 1.0 } else { 0.0 };
        f[(b, ch, y, xx)] * g + x[(b, ch, y, xx)]
    });
    if p.spec.residual == ResidualActivation::Relu {
        out = layers::relu(&out);
    }
    out
}

#[test]
fn dilate_examples() {
    assert_eq!(dilate_mask(&BinaryMask::empty(2, 4, 4)), BinaryMask::empty(2, 4, 4));
    assert_eq!(dilate_mask(&BinaryMask::full(2, 4, 4)), BinaryMask::full(2, 4, 4));

    let d = dilate_mask(&mask_from(1, 4, 4, &[(0, 1, 1)]));
    assert_eq!(d.count(), 9);
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(d.get(0, y, x), y <= 2 && x <= 2);
        }
    }
    let d = dilate_mask(&mask_from(1, 4, 4, &[(0, 0, 0)]));
    assert_eq!(d.count(), 4);
    assert!(d.get(0, 1, 1) && !d.get(0, 2, 0));
}

#[test]
fn dilate_does_not_cross_images() {
    let d = dilate_mask(&mask_from(2, 3, 3, &[(0, 2, 1)]));
    assert_eq!(d.count_in(1), 0);
    assert_eq!(d.count_in(0), 6);
}

#[test]
fn gather_index_examples() {
    let idx = build_gather_index(&BinaryMask::full(1, 2, 2));
    assert_eq!(idx.len(), 4);
    let coords: Vec<_> = (0..4).map(|p| idx.coord(p)).collect();
    assert_eq!(coords, vec![(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]);

    assert!(build_gather_index(&BinaryMask::empty(1, 2, 2)).is_empty());

    let idx = build_gather_index(&mask_from(1, 2, 2, &[(0, 0, 0), (0, 1, 1)]));
    assert_eq!(idx.len(), 2);
    let nb = idx.neighbors()[0];
    for (k, &q) in nb.iter().enumerate() {
        let expect = match k {
            k if k == tap(0, 0) => 0,
            k if k == tap(1, 1) => 1,
            _ => SENTINEL,
        };
        assert_eq!(q, expect, "tap {k}");
    }
}

fn check_index_invariants(g: &BinaryMask) {
    let idx = build_gather_index(g);
    let (_, h, w) = g.dims();
    assert_eq!(idx.len(), g.count());
    let mut prev = None;
    for p in 0..idx.len() {
        let (b, y, x) = idx.coord(p);
        assert!(g.get(b, y, x));
        assert_eq!(idx.row_of(b, y, x), Some(p));
        if let Some(q) = prev {
            assert!(idx.positions()[q] < idx.positions()[p]);
        }
        prev = Some(p);
        let nb = idx.neighbors()[p];
        assert_eq!(nb[4] as usize, p);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let q = nb[tap(dy, dx)];
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                if q == SENTINEL {
                    assert!(!inside || !g.get(b, yy as usize, xx as usize));
                } else {
                    assert!((q as usize) < idx.len());
                    assert_eq!(idx.coord(q as usize), (b, yy as usize, xx as usize));
                }
            }
        }
    }
    for (i, &r) in idx.inverse().iter().enumerate() {
        assert_eq!(r == SENTINEL, !g.bits()[i]);
    }
}

#[test]
fn gather_full_mask_is_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 4, 5));
    let idx = build_gather_index(&BinaryMask::full(2, 4, 5));
    let t = gather(&x, &idx).unwrap();
    assert_eq!(t.shape(), Shape::new(40, 3, 1, 1));
    for p in 0..40 {
        let (b, y, xx) = idx.coord(p);
        assert_eq!(p, (b * 4 + y) * 5 + xx);
        for ch in 0..3 {
            assert_eq!(t[(p, ch, 0, 0)], x[(b, ch, y, xx)]);
        }
    }
    let back = scatter(&t, &idx, &Tensor4D::zeros(x.shape())).unwrap();
    assert_eq!(back, x);
}

#[test]
fn empty_gather_and_scatter() {
    let x = Tensor4D::full(Shape::new(1, 2, 3, 3), 1.5);
    let idx = build_gather_index(&BinaryMask::empty(1, 3, 3));
    let t = gather(&x, &idx).unwrap();
    assert_eq!(t.shape().n, 0);
    assert_eq!(scatter(&t, &idx, &x).unwrap(), x);
    assert_eq!(scatter_add(&t, &idx, &x).unwrap(), x);
}

#[test]
fn scatter_row_count_mismatch() {
    let x = Tensor4D::zeros(Shape::new(1, 2, 3, 3));
    let idx = build_gather_index(&mask_from(1, 3, 3, &[(0, 0, 0), (0, 2, 2)]));
    let t = Tensor4D::zeros(Shape::new(3, 2, 1, 1));
    assert!(matches!(scatter(&t, &idx, &x), Err(Error::RowCount { .. })));
    assert!(matches!(scatter_add(&t, &idx, &x), Err(Error::RowCount { .. })));
}

#[test]
fn gathered_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, Shape::new(1, 3, 5, 5));
    let g = random_mask(&mut rng, 1, 5, 5, 0.4);
    let plan = SparsePlan::new(g);
    let t = gather(&x, &plan.index).unwrap();
    let out = depthwise3x3_gathered(&t, &plan.index, &plan.out_rows, &DepthwiseParams::identity(3)).unwrap();
    for (r, &p) in plan.out_rows.iter().enumerate() {
        for ch in 0..3 {
            assert_eq!(out[(r, ch, 0, 0)], t[(p as usize, ch, 0, 0)]);
        }
    }
}

#[test]
fn gathered_depthwise_errors() {
    let g = mask_from(1, 3, 3, &[(0, 1, 1)]);
    let idx = build_gather_index(&g);
    let t = Tensor4D::zeros(Shape::new(1, 2, 1, 1));
    let p = DepthwiseParams::identity(2);
    assert!(matches!(
        depthwise3x3_gathered(&t, &idx, &[1], &p),
        Err(Error::RowOutOfRange { row: 1, rows: 1 })
    ));
    // the centre of a 3x3 image needs all eight neighbours
    assert!(matches!(
        depthwise3x3_gathered(&t, &idx, &[0], &p),
        Err(Error::MissingNeighbor { row: 0, .. })
    ));
}

fn gathered_matches_dense(seed: u64, n: usize, c: usize, h: usize, w: usize, density: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, Shape::new(n, c, h, w));
    let p = DepthwiseParams::new(
        random_tensor(&mut rng, Shape::new(c, 1, 3, 3)),
        Some(random_tensor(&mut rng, Shape::new(1, c, 1, 1))),
    )
    .unwrap();
    let dense = layers::depthwise3x3_dense(&x, &p).unwrap();
    let g = random_mask(&mut rng, n, h, w, density);
    let plan = SparsePlan::new(g.clone());
    let t = gather(&x, &plan.index).unwrap();
    let out = depthwise3x3_gathered(&t, &plan.index, &plan.out_rows, &p).unwrap();
    assert_eq!(out.shape().n, g.count());
    for (r, (b, y, xx)) in g.active().enumerate() {
        for ch in 0..c {
            assert_eq!(out[(r, ch, 0, 0)], dense[(b, ch, y, xx)]);
        }
    }
}

#[test]
fn gathered_depthwise_full_mask() {
    gathered_matches_dense(5, 2, 4, 6, 7, 1.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dilation_matches_definition(seed in any::<u64>(), n in 1usize..3, h in 1usize..9, w in 1usize..9, d in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mask(&mut rng, n, h, w, d);
        let dg = dilate_mask(&g);
        prop_assert_eq!(&dg, &dilate_oracle(&g));
        prop_assert!(g.is_subset_of(&dg));
        let mut bigger = g.clone();
        for (i, b) in random_mask(&mut rng, n, h, w, 0.2).bits().iter().enumerate() {
            if *b {
                bigger.set(i / (h * w), (i / w) % h, i % w, true);
            }
        }
        prop_assert!(dg.is_subset_of(&dilate_mask(&bigger)));
    }

    #[test]
    fn index_invariants(seed in any::<u64>(), n in 1usize..3, h in 1usize..9, w in 1usize..9, d in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mask(&mut rng, n, h, w, d);
        check_index_invariants(&g);
        check_index_invariants(&dilate_mask(&g));
    }

    #[test]
    fn gather_scatter_round_trip(seed in any::<u64>(), n in 1usize..3, c in 1usize..5, h in 1usize..8, w in 1usize..8, d in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, Shape::new(n, c, h, w));
        let g = random_mask(&mut rng, n, h, w, d);
        let idx = build_gather_index(&g);
        let t = gather(&x, &idx).unwrap();
        let back = scatter(&t, &idx, &Tensor4D::zeros(x.shape())).unwrap();
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let expect = if g.get(b, y, xx) { x[(b, ch, y, xx)] } else { 0.0 };
                        prop_assert_eq!(back[(b, ch, y, xx)], expect);
                    }
                }
            }
        }
        prop_assert_eq!(gather(&back, &idx).unwrap(), t);
    }

    #[test]
    fn gathered_depthwise_is_exact(seed in any::<u64>(), n in 1usize..3, c in 1usize..6, h in 1usize..10, w in 1usize..10, d in 0.0f64..1.0) {
        gathered_matches_dense(seed, n, c, h, w, d);
    }

    #[test]
    fn sparse_block_matches_dense(seed in any::<u64>(), d in prop::sample::select(vec![0.0f64, 0.1, 0.5, 1.0]), relu in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual = if relu { ResidualActivation::Relu } else { ResidualActivation::Identity };
        let p = random_block(&mut rng, 8, 48, residual);
        let x = random_tensor(&mut rng, Shape::new(2, 8, 16, 16));
        let g = random_mask(&mut rng, 2, 16, 16, d);
        let cb = p.compile();
        let dense = cb.forward_dense(&x, Some(&g)).unwrap();
        let (sparse, plan) = cb.forward_sparse(&x, &g).unwrap();
        prop_assert_eq!(&sparse, &dense);
        prop_assert!(dense.max_rel_diff(&block_oracle(&p, &x, &g)) <= 1e-5);
        prop_assert_eq!(cb.sparse_macs(&plan), crate::budget::flops_sparse(&p.spec, g.count() as u64, plan.index.len() as u64));
    }
}

#[test]
fn empty_mask_is_residual_activation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for residual in [ResidualActivation::Identity, ResidualActivation::Relu] {
        let p = random_block(&mut rng, 4, 24, residual);
        let x = random_tensor(&mut rng, Shape::new(2, 4, 6, 6));
        let g = BinaryMask::empty(2, 6, 6);
        let expect = match residual {
            ResidualActivation::Identity => x.clone(),
            ResidualActivation::Relu => layers::relu(&x),
        };
        let cb = p.compile();
        assert_eq!(cb.forward_sparse(&x, &g).unwrap().0, expect);
        assert_eq!(cb.forward_dense(&x, Some(&g)).unwrap(), expect);
    }
}

#[test]
fn full_mask_equals_unmasked_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = random_block(&mut rng, 8, 48, ResidualActivation::Identity);
    let x = random_tensor(&mut rng, Shape::new(1, 8, 9, 11));
    let cb = p.compile();
    let full = BinaryMask::full(1, 9, 11);
    let unmasked = cb.forward_dense(&x, None).unwrap();
    let (sparse, _) = cb.forward_sparse(&x, &full).unwrap();
    assert!(sparse.max_rel_diff(&unmasked) <= 1e-5);
    assert!(unmasked.max_rel_diff(&block_oracle(&p, &x, &full)) <= 1e-5);
}

#[test]
fn traced_eval_matches_compiled() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = random_block(&mut rng, 8, 48, ResidualActivation::Identity);
    let x = random_tensor(&mut rng, Shape::new(2, 8, 16, 16));
    let cfg = GumbelConfig::inference();
    let cb = p.compile();
    let out = cb
        .run(&x, &cfg, &mut rng, BlockMode::Sparse, MaskSource::Gate)
        .unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tb = p.forward_traced(&mut tape, xv, &cfg, &mut rng, false, None).unwrap();
    assert_eq!(tb.mask, out.mask);
    assert_eq!(tb.dilated, out.budget.dilated);
    assert!(tape.value(tb.output).max_rel_diff(&out.output) <= 1e-5);
    assert_eq!(tb.params.len(), p.params().len());
}

#[test]
fn block_forward_modes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = random_block(&mut rng, 8, 48, ResidualActivation::Identity);
    let x = random_tensor(&mut rng, Shape::new(2, 8, 16, 16));
    let g = random_mask(&mut rng, 2, 16, 16, 0.3);
    let cfg = GumbelConfig::inference();
    let a = block_forward(&x, &p, &cfg, &mut rng, BlockMode::DenseMasked, MaskSource::Fixed(&g)).unwrap();
    let b = block_forward(&x, &p, &cfg, &mut rng, BlockMode::Sparse, MaskSource::Fixed(&g)).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.budget, b.budget);
    assert_eq!(a.budget.active, g.count());
}

#[test]
fn ungated_block_changes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = GatedBlockSpec {
        channels: 4,
        expansion_channels: 8,
        out_channels: 6,
        mask_unit: MaskUnitKind::Conv1x1,
        gated: false,
        residual: ResidualActivation::Identity,
    };
    let p = BlockParams::init(spec, &mut rng).unwrap();
    assert!(p.mask.is_none());
    let x = random_tensor(&mut rng, Shape::new(1, 4, 5, 5));
    let out = block_forward(&x, &p, &GumbelConfig::inference(), &mut rng, BlockMode::Sparse, MaskSource::Gate).unwrap();
    assert_eq!(out.output.shape(), Shape::new(1, 6, 5, 5));
    assert!((out.budget.fraction() - 1.0).abs() < 1e-12);
}

#[test]
fn invalid_specs_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut spec = GatedBlockSpec::inverted_residual(4, 6);
    spec.out_channels = 8;
    assert!(BlockParams::init(spec, &mut rng).is_err());
    let mut spec = GatedBlockSpec::inverted_residual(4, 6);
    spec.expansion_channels = 2;
    assert!(BlockParams::init(spec, &mut rng).is_err());
}

#[test]
fn channel_mismatch_is_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let p = random_block(&mut rng, 4, 24, ResidualActivation::Identity);
    let x = Tensor4D::zeros(Shape::new(1, 5, 4, 4));
    assert!(matches!(
        p.compile().forward_dense(&x, None),
        Err(Error::ChannelMismatch { .. })
    ));
}
