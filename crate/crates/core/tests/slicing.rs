mod common;

use common::*;
use hires_core::numerics::{resize_bilinear, Tensor};
use hires_core::slice_restore::{merge, merge_index, reslice, FeatureMap};
use hires_core::slicer::{
    canvas_offset, compute_grid, extract_slices, lowres_view, pad_to_canvas, slice_image,
    stitch_slices, GridSpec, ImageBuffer, PAD_VALUE,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn rule_examples() {
    let g = compute_grid(896, 896, 224, 16).unwrap();
    assert_eq!((g.m, g.n, g.quadrupled, g.slice_count()), (4, 4, false, 16));
    let g = compute_grid(448, 448, 224, 16).unwrap();
    assert_eq!((g.m, g.n, g.quadrupled, g.slice_count()), (4, 4, true, 16));
    let g = compute_grid(100, 300, 224, 16).unwrap();
    assert_eq!((g.m, g.n, g.quadrupled, g.slice_count()), (2, 4, true, 8));
}

#[test]
fn randomized_grids_follow_the_rule() {
    let mut r = rng(31);
    for _ in 0..500 {
        let (h, w) = (r.random_range(1..2000), r.random_range(1..2000));
        let base = [14, 28, 224, 336][r.random_range(0..4)];
        let max = r.random_range(1..=16);
        let g = compute_grid(h, w, base, max).unwrap();
        let bad = grid_rule_violations(h, w, base, max, &g);
        assert!(bad.is_empty(), "{h}x{w} r={base} M={max}: {bad:?}");
    }
}

#[test]
fn centered_padding_offset() {
    let g = compute_grid(100, 300, 224, 16).unwrap();
    assert_eq!((g.canvas_h, g.canvas_w), (448, 896));
    let img = random_image(100, 300, 3, 32);
    assert_eq!(canvas_offset(&img, &g), (174, 298));
    let canvas = pad_to_canvas(&img, &g).unwrap();
    assert_eq!(canvas.pixel(174, 298), img.pixel(0, 0));
    assert_eq!(canvas.pixel(273, 597), img.pixel(99, 299));
    assert_eq!(canvas.pixel(173, 298), &[PAD_VALUE; 3]);
    assert_eq!(canvas.pixel(274, 598), &[PAD_VALUE; 3]);
}

#[test]
fn stitch_inverts_extract_at_full_size() {
    let g = compute_grid(448, 448, 224, 16).unwrap();
    let canvas = random_image(g.canvas_h, g.canvas_w, 3, 33);
    let slices = extract_slices(&canvas, &g).unwrap();
    assert_eq!(slices.len(), 16);
    assert_eq!(stitch_slices(&slices, &g).unwrap(), canvas);
}

#[test]
fn lowres_of_square_double_is_half_resize() {
    let img = random_image(56, 56, 3, 34);
    let low = lowres_view(&img, 28).unwrap();
    let want = resize_bilinear(&img.to_tensor(), 28, 28).unwrap();
    assert!(low.to_tensor().bit_eq(&want));
}

#[test]
fn lowres_of_tall_image_is_pillarboxed() {
    let r = 28;
    let img = random_image(2 * r, r, 3, 35);
    let low = lowres_view(&img, r).unwrap();
    assert_eq!((low.height(), low.width()), (r, r));
    let inner = resize_bilinear(&img.to_tensor(), r, r / 2).unwrap();
    let inner = ImageBuffer::from_tensor(&inner).unwrap();
    for y in 0..r {
        for x in 0..r {
            let want = if (r / 4..3 * r / 4).contains(&x) {
                inner.pixel(y, x - r / 4).to_vec()
            } else {
                vec![PAD_VALUE; 3]
            };
            assert_eq!(low.pixel(y, x), &want[..], "({y}, {x})");
        }
    }
    let same = random_image(r, r, 3, 36);
    assert_eq!(lowres_view(&same, r).unwrap(), same);
}

#[test]
fn sliced_image_is_consistent() {
    let img = random_image(90, 200, 3, 37);
    let s = slice_image(&img, 28, 16).unwrap();
    assert_eq!(s.slices.len(), s.grid.slice_count());
    assert_eq!(stitch_slices(&s.slices, &s.grid).unwrap(), s.canvas);
    assert_eq!((s.lowres.height(), s.lowres.width()), (28, 28));
}

#[test]
fn merge_index_is_exhaustive() {
    // every whole-map cell names exactly one (slice, token) source
    let grid = GridSpec::fixed(1, 2, 3);
    let spatial = (2, 3);
    let l = spatial.0 * spatial.1;
    let slices: Vec<FeatureMap> = (0..6)
        .map(|k| {
            let t = Tensor::from_fn(&[l, 1], |i| (k * 100 + i) as f64);
            FeatureMap::new(t, spatial).unwrap()
        })
        .collect();
    let whole = merge(&slices, &grid).unwrap();
    assert_eq!(whole.shape(), &[4, 9, 1]);
    let mut seen = vec![0; 6 * l];
    for y in 0..4 {
        for x in 0..9 {
            let (k, ty, tx) = ((y / 2) * 3 + x / 3, y % 2, x % 3);
            let src = k * 100 + ty * 3 + tx;
            assert_eq!(whole.at(&[y, x, 0]), src as f64);
            seen[k * l + ty * 3 + tx] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    let idx = merge_index(&grid, spatial);
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..6 * l).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reslice_inverts_merge(m in 1usize..=4, n in 1usize..=4, ht in 1usize..4, wt in 1usize..4, seed in 0u64..10_000) {
        let grid = GridSpec::fixed(1, m, n);
        let x = random_slices(&grid, (ht, wt), 3, seed);
        let back = reslice(&merge(&x, &grid).unwrap(), &grid, (ht, wt)).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!(a.tokens.bit_eq(&b.tokens));
            prop_assert_eq!(a.spatial, b.spatial);
        }
    }

    #[test]
    fn stitch_inverts_extract(m in 1usize..=4, n in 1usize..=4, r in 1usize..9, seed in 0u64..10_000) {
        let grid = GridSpec::fixed(r, m, n);
        let canvas = random_image(m * r, n * r, 3, seed);
        let back = stitch_slices(&extract_slices(&canvas, &grid).unwrap(), &grid).unwrap();
        prop_assert_eq!(back, canvas);
    }

    #[test]
    fn grid_never_exceeds_cap(h in 1usize..5000, w in 1usize..5000, max in 1usize..=32) {
        let g = compute_grid(h, w, 224, max).unwrap();
        prop_assert!(g.m * g.n <= max);
        let (ch, cw) = g.content_dims(h, w);
        prop_assert!(ch <= g.canvas_h && cw <= g.canvas_w);
    }
}
