use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use bootseg::data::{Annotation, Detection};
use bootseg::eval::{compute_metrics, greedy_match, postprocess, EvalParams};
use bootseg::mask::{rle_encode, BinaryMask};
use bootseg::refdetect::{extract_features, Raster, RefDetector, RefDetectorParams, Schedule, TrainingImage};
use bootseg::synth::{generate_scene, OverlapMode, Scene, SceneSpec};
use proptest::prelude::*;

/// Features from an explicitly edge-padded intensity image, with the local
/// variance in place of the standard deviation.
fn oracle_features(raster: &Raster) -> Vec<[f64; 5]> {
    let (w, h) = (raster.width() as i64, raster.height() as i64);
    let lum = |r: i64, c: i64| {
        let p = raster.get(r.clamp(0, h - 1) as u32, c.clamp(0, w - 1) as u32);
        (p[0] + p[1] + p[2]) / 3.0
    };
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut s2) = (0.0, 0.0);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let v = lum(r + dr, c + dc);
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / 9.0;
            let var = (s2 / 9.0 - mean * mean).max(0.0);
            let [red, g, b] = raster.get(r as u32, c as u32);
            out.push([red, g, b, mean, var]);
        }
    }
    out
}

fn assert_features_match(raster: &Raster) {
    let grid = extract_features(raster);
    let expected = oracle_features(raster);
    assert_eq!(grid.features.len(), expected.len());
    for (got, want) in grid.features.iter().zip(&expected) {
        let got = [got[0], got[1], got[2], got[3], got[4] * got[4]];
        for k in 0..5 {
            assert!((got[k] - want[k]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn features_on_a_4x4_fixture() {
    let pixels: Vec<[f64; 3]> = (0..16)
        .map(|i| {
            let v = i as f64 / 15.0;
            [v, 1.0 - v, (i % 3) as f64 / 2.0]
        })
        .collect();
    let raster = Raster::new(4, 4, pixels);
    assert_features_match(&raster);
    // Corner (0,0): rows {0,0,1} x cols {0,0,1} of intensity.
    let lum = |i: usize| {
        let v = i as f64 / 15.0;
        (v + 1.0 - v + (i % 3) as f64 / 2.0) / 3.0
    };
    let window = [0, 0, 1, 0, 0, 1, 4, 4, 5].map(lum);
    let mean = window.iter().sum::<f64>() / 9.0;
    assert!((extract_features(&raster).get(0, 0)[3] - mean).abs() < 1e-12);
}

proptest! {
    #[test]
    fn features_match_padded_oracle(
        (w, h, px) in (1u32..7, 1u32..7).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(prop::array::uniform3(0.0f64..=1.0), (w * h) as usize))
        })
    ) {
        assert_features_match(&Raster::new(w, h, px));
    }
}

fn block_image() -> (Raster, BinaryMask) {
    let mask = BinaryMask::from_fn(32, 32, |r, c| (11..21).contains(&r) && (11..21).contains(&c));
    let mut raster = Raster::filled(32, 32, [0.2, 0.3, 0.6]);
    for r in 0..32 {
        for c in 0..32 {
            if mask.get(r, c) {
                raster.set(r, c, [0.8, 0.5, 0.2]);
            }
        }
    }
    (raster, mask)
}

fn schedule(epochs: u32, seed: u64) -> Schedule {
    Schedule {
        epochs,
        batch_size: 2,
        steps_per_epoch: 24,
        seed,
        augment: true,
    }
}

#[test]
fn one_block_is_one_confident_detection() {
    let (raster, mask) = block_image();
    let mut det = RefDetector::new(RefDetectorParams::default()).unwrap();
    let pool = [TrainingImage {
        raster: Arc::new(raster.clone()),
        masks: vec![(1, mask.clone())],
    }];
    det.fit(&pool, &schedule(1, 0)).unwrap();
    let segs = det.segment(&raster).unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].category_id, 1);
    assert!(segs[0].confidence > 0.5);
    assert_eq!(segs[0].mask, mask);
}

/// 8-connected components of a mask, by breadth-first search.
fn components(m: &BinaryMask) -> usize {
    let mut seen = BTreeSet::new();
    let mut n = 0;
    for r in 0..m.height() {
        for c in 0..m.width() {
            if !m.get(r, c) || !seen.insert((r, c)) {
                continue;
            }
            n += 1;
            let mut queue = VecDeque::from([(r, c)]);
            while let Some((y, x)) = queue.pop_front() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= m.height() as i64 || nx >= m.width() as i64 {
                            continue;
                        }
                        let p = (ny as u32, nx as u32);
                        if m.get(p.0, p.1) && seen.insert(p) {
                            queue.push_back(p);
                        }
                    }
                }
            }
        }
    }
    n
}

fn scenes(mode: OverlapMode, seeds: std::ops::Range<u64>) -> Vec<Scene> {
    seeds
        .map(|s| generate_scene(&SceneSpec::coffee(mode, 12, s)).unwrap())
        .collect()
}

fn trained(train: &[Scene], epochs: u32, seed: u64) -> RefDetector {
    let pool: Vec<TrainingImage> = train
        .iter()
        .map(|s| TrainingImage {
            raster: Arc::new(s.raster.clone()),
            masks: s.instances.iter().map(|i| (i.category_id, i.mask.clone())).collect(),
        })
        .collect();
    let mut det = RefDetector::new(RefDetectorParams::default()).unwrap();
    det.fit(&pool, &schedule(epochs, seed)).unwrap();
    det
}

#[test]
fn segments_are_disjoint_connected_and_large_enough() {
    let det = trained(&scenes(OverlapMode::LooselyOverlapping, 0..2), 2, 1);
    for scene in scenes(OverlapMode::HeavilyConnected, 50..52) {
        let segs = det.segment(&scene.raster).unwrap();
        assert!(!segs.is_empty());
        let mut claimed = BinaryMask::new(128, 128);
        for s in &segs {
            assert!(s.confidence > 0.5 && s.confidence <= 1.0);
            assert!(s.mask.area() >= det.params().min_area);
            assert_eq!(components(&s.mask), 1);
            for r in 0..128 {
                for c in 0..128 {
                    if s.mask.get(r, c) {
                        assert!(!claimed.get(r, c));
                        claimed.set(r, c, true);
                    }
                }
            }
        }
    }
}

#[test]
fn unconnected_scenes_are_learned_exactly() {
    let params = EvalParams {
        eval_iou: 0.75,
        nms_iou: 0.5,
        max_dets_per_image: 100,
    };
    for seed in 0..5 {
        let train = scenes(OverlapMode::Unconnected, seed * 100..seed * 100 + 3);
        let det = trained(&train, 5, seed);
        let test = scenes(OverlapMode::Unconnected, seed * 100 + 50..seed * 100 + 52);
        let mut gt: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
        let mut dets = Vec::new();
        let mut next = 1;
        for (k, scene) in test.iter().enumerate() {
            let id = k as u64 + 1;
            let anns = gt.entry(id).or_default();
            for inst in &scene.instances {
                anns.push(Annotation::human(next, id, inst.category_id, rle_encode(&inst.mask)));
                next += 1;
            }
            for s in det.segment(&scene.raster).unwrap() {
                dets.push(Detection {
                    image_id: id,
                    category_id: s.category_id,
                    mask: rle_encode(&s.mask),
                    confidence: s.confidence,
                });
            }
        }
        let ids: BTreeSet<u64> = gt.keys().copied().collect();
        let (kept, _) = postprocess(&dets, &ids, &params).unwrap();
        let (ap, ar) = compute_metrics(&greedy_match(&gt, &kept, 0.75).unwrap()).unwrap();
        assert_eq!((ap, ar), (1.0, 1.0), "seed {seed}");
    }
}
