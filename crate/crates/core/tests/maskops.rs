use bootseg::data::Detection;
use bootseg::mask::{mask_iou, nms, rasterize_polygon, rle_decode, rle_encode, BinaryMask, MaskError, RleMask};
use proptest::prelude::*;

fn arb_mask(max: u32) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), (h * w) as usize)
            .prop_map(move |bits| BinaryMask::from_bits(h, w, bits).unwrap())
    })
}

/// Runs of equal values over column-major pixels, starting with a zero run.
fn column_major_counts(m: &BinaryMask) -> Vec<u64> {
    let mut counts = vec![0u64];
    let mut current = false;
    for col in 0..m.width() {
        for row in 0..m.height() {
            let v = m.get(row, col);
            if v != current {
                counts.push(0);
                current = v;
            }
            *counts.last_mut().unwrap() += 1;
        }
    }
    counts
}

fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for row in 0..a.height() {
        for col in 0..a.width() {
            let (x, y) = (a.get(row, col), b.get(row, col));
            inter += (x && y) as u64;
            union += (x || y) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Crossing-number test with horizontal rays cast to +x.
fn even_odd_inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut crossings = 0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        if (y1 > y) != (y2 > y) {
            let xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1);
            if xc > x {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

#[test]
fn single_pixel_fixture_is_0_1_3() {
    let mut m = BinaryMask::new(2, 2);
    m.set(0, 0, true);
    let rle = rle_encode(&m);
    assert_eq!(rle.counts(), &[0, 1, 3]);
    let back = rle_decode(&RleMask::new(2, 2, vec![0, 1, 3]).unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn empty_fixture_is_single_run() {
    let rle = rle_encode(&BinaryMask::new(2, 2));
    assert_eq!(rle.counts(), &[4]);
    assert!(rle.is_empty());
}

#[test]
fn full_column_starts_with_empty_zero_run() {
    let rle = rle_encode(&BinaryMask::from_fn(3, 1, |_, _| true));
    assert_eq!(rle.counts(), &[0, 3]);
}

#[test]
fn short_counts_are_rejected() {
    assert_eq!(
        RleMask::new(2, 2, vec![3]),
        Err(MaskError::Length { sum: 3, expected: 4 })
    );
}

#[test]
fn counts_must_cover_the_image() {
    assert!(matches!(
        RleMask::new(2, 2, vec![0, 1, 2]),
        Err(MaskError::Length { sum: 3, expected: 4 })
    ));
}

#[test]
fn half_overlap_iou() {
    let a = BinaryMask::from_fn(4, 4, |r, _| r < 3);
    let b = BinaryMask::from_fn(4, 4, |r, _| r >= 1);
    assert_eq!(mask_iou(&a, &b).unwrap(), 0.5);
    assert_eq!(rle_encode(&a).iou(&rle_encode(&b)).unwrap(), 0.5);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = BinaryMask::new(4, 4);
    let b = BinaryMask::new(4, 5);
    assert!(mask_iou(&a, &b).is_err());
}

#[test]
fn right_triangle_covers_ten_centres() {
    let tri = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
    let m = rasterize_polygon(&tri, 4, 4).unwrap();
    assert_eq!(m.area(), 10);
    let mut expected = 0;
    for row in 0..4 {
        for col in 0..4 {
            let inside = col as f64 + 0.5 + row as f64 + 0.5 <= 4.0;
            assert_eq!(m.get(row, col), inside, "pixel ({row},{col})");
            expected += inside as u64;
        }
    }
    assert_eq!(expected, 10);
}

#[test]
fn degenerate_polygons_are_rejected() {
    assert!(rasterize_polygon(&[(0.0, 0.0), (1.0, 1.0)], 4, 4).is_err());
    assert!(rasterize_polygon(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)], 4, 4).is_err());
    assert!(rasterize_polygon(&[(0.0, 0.0), (9.0, 0.0), (0.0, 2.0)], 4, 4).is_err());
}

fn det(image_id: u64, category_id: u64, confidence: f64, mask: BinaryMask) -> Detection {
    Detection {
        image_id,
        category_id,
        mask: rle_encode(&mask),
        confidence,
    }
}

#[test]
fn nms_chain_keeps_both_ends() {
    // a and c are disjoint; a-b IoU 3/11, b-c IoU 3/10.
    let a = BinaryMask::from_fn(1, 11, |_, c| c < 4);
    let b = BinaryMask::from_fn(1, 11, |_, c| c >= 1);
    let c = BinaryMask::from_fn(1, 11, |_, c| c >= 8);
    let dets = [det(1, 1, 0.9, a), det(1, 1, 0.8, b), det(1, 1, 0.7, c)];
    assert!((dets[0].mask.iou(&dets[1].mask).unwrap() - 3.0 / 11.0).abs() < 1e-12);
    assert!((dets[1].mask.iou(&dets[2].mask).unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(dets[0].mask.iou(&dets[2].mask).unwrap(), 0.0);
    let kept = nms(&dets, 0.25).unwrap();
    let conf: Vec<f64> = kept.iter().map(|d| d.confidence).collect();
    assert_eq!(conf, vec![0.9, 0.7]);
}

#[test]
fn nms_is_class_aware_and_single_image() {
    let m = BinaryMask::from_fn(4, 4, |r, _| r < 2);
    let dets = [det(1, 1, 0.9, m.clone()), det(1, 2, 0.8, m.clone())];
    assert_eq!(nms(&dets, 0.5).unwrap().len(), 2);
    let mixed = [det(1, 1, 0.9, m.clone()), det(2, 1, 0.8, m)];
    assert!(nms(&mixed, 0.5).is_err());
}

fn arb_detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((1u64..=2, 0.0f64..1.0, 0u32..6, 0u32..6, 1u32..5, 1u32..5), 0..10).prop_map(|v| {
        v.into_iter()
            .map(|(cat, conf, r0, c0, h, w)| {
                det(
                    1,
                    cat,
                    conf,
                    BinaryMask::from_fn(10, 10, |r, c| (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c)),
                )
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rle_roundtrip(m in arb_mask(64)) {
        let rle = rle_encode(&m);
        prop_assert_eq!(rle_decode(&rle).unwrap(), m.clone());
        let expected = column_major_counts(&m);
        prop_assert_eq!(rle.counts(), expected.as_slice());
        prop_assert_eq!(rle.area(), m.area());
        prop_assert_eq!(rle.bbox(), m.bbox());
    }

    #[test]
    fn rle_json_roundtrip(m in arb_mask(16)) {
        let rle = rle_encode(&m);
        let json = serde_json::to_string(&rle).unwrap();
        prop_assert_eq!(serde_json::from_str::<RleMask>(&json).unwrap(), rle);
    }

    #[test]
    fn iou_matches_pixel_counting((a, b) in (1u32..20, 1u32..20).prop_flat_map(|(h, w)| {
        let n = (h * w) as usize;
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
            .prop_map(move |(x, y)| (BinaryMask::from_bits(h, w, x).unwrap(), BinaryMask::from_bits(h, w, y).unwrap()))
    })) {
        let expected = pixel_iou(&a, &b);
        let (ra, rb) = (rle_encode(&a), rle_encode(&b));
        if a.is_empty() && b.is_empty() {
            prop_assert_eq!(ra.iou(&rb), Err(MaskError::Empty));
            return Ok(());
        }
        let got = ra.iou(&rb).unwrap();
        prop_assert!((got - expected).abs() < 1e-12);
        prop_assert_eq!(got, rb.iou(&ra).unwrap());
        prop_assert!((0.0..=1.0).contains(&got));
        if !a.is_empty() {
            prop_assert_eq!(ra.iou(&ra).unwrap(), 1.0);
        }
    }

    #[test]
    fn polygon_matches_even_odd_oracle(
        pts in prop::collection::vec((0.0f64..12.0, 0.0f64..9.0), 3..8)
    ) {
        if let Ok(m) = rasterize_polygon(&pts, 9, 12) {
            for row in 0..9 {
                for col in 0..12 {
                    let inside = even_odd_inside(&pts, col as f64 + 0.5, row as f64 + 0.5);
                    prop_assert_eq!(m.get(row, col), inside, "pixel ({}, {})", row, col);
                }
            }
        }
    }

    #[test]
    fn nms_laws(dets in arb_detections(), thr in 0.0f64..1.0) {
        let kept = nms(&dets, thr).unwrap();
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.category_id == b.category_id {
                    prop_assert!(a.mask.iou(&b.mask).unwrap() <= thr);
                }
            }
        }
        for d in &dets {
            if !kept.contains(d) {
                prop_assert!(kept.iter().any(|k| k.category_id == d.category_id
                    && k.confidence >= d.confidence
                    && k.mask.iou(&d.mask).unwrap() > thr));
            }
        }
        prop_assert_eq!(nms(&kept, thr).unwrap(), kept);
    }
}
