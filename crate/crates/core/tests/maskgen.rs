use promptpaint::maskgen::{bbox_mask, dilate, fitting_ratio, random_freeform_mask, BBox, BrushParams, Mask, MaskPair};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force set union: every set pixel paints its k×k neighbourhood,
/// repeated `it` times, on plain integer coordinates.
fn union_oracle(bits: &[bool], h: usize, w: usize, k: usize, it: usize) -> Vec<bool> {
    let r = (k / 2) as i64;
    let mut cur = bits.to_vec();
    for _ in 0..it {
        let mut next = vec![false; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !cur[(y * w as i64 + x) as usize] {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                            next[(ny * w as i64 + nx) as usize] = true;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

#[test]
fn every_4x4_mask_matches_the_union_oracle() {
    for code in 0u32..65_536 {
        let bits: Vec<bool> = (0..16).map(|i| code >> i & 1 == 1).collect();
        let m = Mask::from_bits(4, 4, bits.clone()).unwrap();
        for it in 0..=2 {
            let got = dilate(&m, 3, it).unwrap();
            assert_eq!(got.bits(), union_oracle(&bits, 4, 4, 3, it).as_slice(), "mask {code:#06x}, it {it}");
        }
    }
}

#[test]
fn single_pixel_grows_to_a_block() {
    let mut m = Mask::empty(5, 5);
    m.set(2, 2, true);
    let d = dilate(&m, 3, 1).unwrap();
    assert_eq!(d.area(), 9);
    assert_eq!(d.tight_bbox().unwrap(), BBox { x0: 1, y0: 1, x1: 4, y1: 4 });
}

#[test]
fn even_kernel_is_rejected() {
    assert!(dilate(&Mask::empty(4, 4), 2, 1).is_err());
}

#[test]
fn bbox_mask_contract() {
    assert_eq!(bbox_mask(BBox { x0: 0, y0: 0, x1: 8, y1: 8 }, 8, 8).unwrap(), Mask::full(8, 8));
    assert_eq!(bbox_mask(BBox { x0: 2, y0: 2, x1: 4, y1: 4 }, 8, 8).unwrap().area(), 4);
    assert!(bbox_mask(BBox { x0: 3, y0: 2, x1: 3, y1: 4 }, 8, 8).is_err());
    assert!(bbox_mask(BBox { x0: 0, y0: 0, x1: 9, y1: 4 }, 8, 8).is_err());
}

#[test]
fn fitting_ratio_examples() {
    let m = Mask::from_fn(6, 6, |y, x| y == 3 && x == 3);
    assert_eq!(fitting_ratio(&m, &m).unwrap(), 1.0);
    let d = dilate(&m, 3, 1).unwrap();
    assert!((fitting_ratio(&m, &d).unwrap() - 1.0 / 9.0).abs() < 1e-15);
    assert!(fitting_ratio(&d, &m).is_err());
    assert!(fitting_ratio(&Mask::empty(6, 6), &Mask::empty(6, 6)).is_err());
}

#[test]
fn fitting_ratio_does_not_increase_with_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let brush = BrushParams::default();
    for _ in 0..1000 {
        let m = random_freeform_mask(32, 32, &mut rng, &brush).unwrap();
        let k = if rng.random_bool(0.5) { 3 } else { 5 };
        let mut last = 1.0;
        for it in 0..=6 {
            let a = MaskPair::expand(m.clone(), k, it).unwrap().alpha;
            assert!(a <= last, "alpha rose from {last} to {a} at it={it}");
            last = a;
        }
    }
}

#[test]
fn freeform_coverage_stays_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let brush = BrushParams::default();
    for i in 0..10_000 {
        let m = random_freeform_mask(32, 32, &mut rng, &brush).unwrap();
        let c = m.coverage();
        assert!((0.05..=0.50).contains(&c), "mask {i} covers {c}");
    }
}

#[test]
fn freeform_is_deterministic() {
    let brush = BrushParams::default();
    let a = random_freeform_mask(32, 32, &mut ChaCha8Rng::seed_from_u64(1), &brush).unwrap();
    let b = random_freeform_mask(32, 32, &mut ChaCha8Rng::seed_from_u64(1), &brush).unwrap();
    assert_eq!(a, b);
}

#[test]
fn impossible_brush_respects_the_cap_or_errors() {
    let brush = BrushParams {
        width: (40.0, 50.0),
        ..BrushParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        if let Ok(m) = random_freeform_mask(32, 32, &mut rng, &brush) { assert!(m.coverage() <= 0.50) }
    }
}

fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.15), h * w).prop_map(move |b| Mask::from_bits(h, w, b).unwrap())
}

proptest! {
    #[test]
    fn dilation_is_monotone(m in arb_mask(12, 12), it in 0usize..4) {
        for k in [1usize, 3, 5] {
            let a = dilate(&m, k, it).unwrap();
            prop_assert!(m.is_subset_of(&a));
            prop_assert!(a.is_subset_of(&dilate(&m, k, it + 1).unwrap()));
            if k > 1 {
                prop_assert!(dilate(&m, k - 2, it).unwrap().is_subset_of(&a));
            }
        }
        prop_assert_eq!(dilate(&m, 1, it).unwrap(), m.clone());
    }

    #[test]
    fn repeated_dilation_composes(m in arb_mask(10, 10), k in prop::sample::select(vec![3usize, 5])) {
        let twice = dilate(&dilate(&m, k, 1).unwrap(), k, 1).unwrap();
        prop_assert_eq!(twice, dilate(&m, k, 2).unwrap());
    }

    #[test]
    fn dilation_commutes_with_interior_shifts(m in arb_mask(8, 8), dy in -3isize..=3, dx in -3isize..=3) {
        // embed in a 20×20 frame so that neither copy meets the border
        let big = Mask::from_fn(20, 20, |y, x| (6..14).contains(&y) && (6..14).contains(&x) && m.get(y - 6, x - 6));
        let shifted_then = dilate(&big.translated(dy, dx), 3, 2).unwrap();
        let then_shifted = dilate(&big, 3, 2).unwrap().translated(dy, dx);
        prop_assert_eq!(shifted_then, then_shifted);
    }

    #[test]
    fn fitting_ratio_ignores_joint_translation(m in arb_mask(8, 8), dy in -3isize..=3, dx in -3isize..=3) {
        prop_assume!(!m.is_empty());
        let big = Mask::from_fn(24, 24, |y, x| (8..16).contains(&y) && (8..16).contains(&x) && m.get(y - 8, x - 8));
        let d = dilate(&big, 3, 1).unwrap();
        let a = fitting_ratio(&big, &d).unwrap();
        let b = fitting_ratio(&big.translated(dy, dx), &d.translated(dy, dx)).unwrap();
        prop_assert_eq!(a, b);
    }
}
