use std::collections::BTreeSet;

use bootseg::data::{load_coco, Partition, Source};
use bootseg::mask::{mask_iou, rle_decode, BinaryMask};
use bootseg::synth::{
    generate_experiment, generate_scene, ExperimentSpec, OverlapMode, Scene, SceneSpec, SynthError, DATASET_FILE,
};

fn pixels(m: &BinaryMask) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                out.push((r as i64, c as i64));
            }
        }
    }
    out
}

/// Smallest Chebyshev distance between any two pixels of the masks.
fn chebyshev_gap(a: &[(i64, i64)], b: &[(i64, i64)]) -> i64 {
    let mut best = i64::MAX;
    for &(r0, c0) in a {
        for &(r1, c1) in b {
            best = best.min((r0 - r1).abs().max((c0 - c1).abs()));
        }
    }
    best
}

fn all_pixels(scene: &Scene) -> Vec<Vec<(i64, i64)>> {
    scene.instances.iter().map(|i| pixels(&i.mask)).collect()
}

fn assert_disjoint(scene: &Scene) {
    let mut seen = BTreeSet::new();
    let regions = scene.instances.iter().map(|i| &i.mask).chain(&scene.distractors);
    for m in regions {
        for p in pixels(m) {
            assert!(seen.insert(p), "pixel {p:?} claimed twice");
        }
    }
}

#[test]
fn unconnected_scenes_keep_instances_apart() {
    for seed in 0..4 {
        let scene = generate_scene(&SceneSpec::coffee(OverlapMode::Unconnected, 20, seed)).unwrap();
        assert_disjoint(&scene);
        let px = all_pixels(&scene);
        for i in 0..px.len() {
            for j in i + 1..px.len() {
                assert!(
                    chebyshev_gap(&px[i], &px[j]) > 2,
                    "seed {seed}: instances {i} and {j} touch"
                );
                assert_eq!(mask_iou(&scene.instances[i].mask, &scene.instances[j].mask), Ok(0.0));
            }
        }
    }
}

#[test]
fn loose_scenes_have_a_touching_pair() {
    for seed in 0..4 {
        let scene = generate_scene(&SceneSpec::coffee(OverlapMode::LooselyOverlapping, 30, seed)).unwrap();
        assert_disjoint(&scene);
        let px = all_pixels(&scene);
        let touching = (0..px.len()).any(|i| (i + 1..px.len()).any(|j| chebyshev_gap(&px[i], &px[j]) <= 2));
        assert!(touching, "seed {seed}");
        for i in 0..px.len() {
            for j in i + 1..px.len() {
                assert!(mask_iou(&scene.instances[i].mask, &scene.instances[j].mask).unwrap() <= 0.3);
            }
        }
    }
}

#[test]
fn heavy_scenes_mostly_touch() {
    for seed in 0..4 {
        let scene = generate_scene(&SceneSpec::coffee(OverlapMode::HeavilyConnected, 30, seed)).unwrap();
        assert_disjoint(&scene);
        let px = all_pixels(&scene);
        let touching = (0..px.len())
            .filter(|&i| (0..px.len()).any(|j| j != i && chebyshev_gap(&px[i], &px[j]) <= 2))
            .count();
        assert!(touching * 2 >= px.len(), "seed {seed}: {touching} of {}", px.len());
    }
}

#[test]
fn visible_regions_meet_the_minimum_area() {
    for mode in OverlapMode::ALL {
        let spec = SceneSpec::coffee(mode, 30, 9);
        let scene = generate_scene(&spec).unwrap();
        assert!(!scene.instances.is_empty());
        assert!(scene.instances.len() <= 30);
        for inst in &scene.instances {
            assert!(inst.mask.area() >= spec.min_visible_area);
            assert_eq!((inst.mask.height(), inst.mask.width()), (128, 128));
        }
    }
}

#[test]
fn distractors_are_never_ground_truth() {
    let spec = ExperimentSpec::coffee_distractors(1, 1, 5).scene(OverlapMode::LooselyOverlapping, 0);
    let scene = generate_scene(&spec).unwrap();
    assert_eq!(scene.distractors.len(), 4);
    assert_disjoint(&scene);
    for d in &scene.distractors {
        assert!(d.area() > 0);
        for inst in &scene.instances {
            assert_ne!(&inst.mask, d);
        }
    }
    assert!(scene.instances.len() <= 26);
}

#[test]
fn scenes_are_deterministic_per_seed() {
    let spec = SceneSpec::coffee(OverlapMode::LooselyOverlapping, 20, 42);
    let a = generate_scene(&spec).unwrap();
    assert_eq!(a, generate_scene(&spec).unwrap());
    let b = generate_scene(&SceneSpec { seed: 43, ..spec }).unwrap();
    assert_ne!(a.raster, b.raster);
}

#[test]
fn overfull_canvas_is_a_packing_error() {
    let spec = SceneSpec {
        width: 64,
        height: 64,
        ..SceneSpec::coffee(OverlapMode::Unconnected, 100, 0)
    };
    assert!(matches!(generate_scene(&spec), Err(SynthError::Packing(_))));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = SceneSpec::coffee(OverlapMode::Unconnected, 5, 0);
    spec.distractor_blend = 1.5;
    assert!(matches!(generate_scene(&spec), Err(SynthError::Spec(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        generate_experiment(&ExperimentSpec::coffee(0, 2, 0), dir.path()),
        Err(SynthError::Spec(_))
    ));
}

#[test]
fn coffee_experiment_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::coffee(1, 6, 3);
    let ds = generate_experiment(&spec, dir.path()).unwrap();
    assert_eq!(ds.images.len(), 2 + 6 + 3);
    assert_eq!(ds.partitions.bootstrapping.len(), 2);
    assert_eq!(ds.partitions.training.len(), 8);
    assert_eq!(ds.partitions.testing.len(), 3);
    assert!(ds.partitions.bootstrapping.is_subset(&ds.partitions.training));
    assert!(ds.partitions.testing.is_disjoint(&ds.partitions.training));
    assert!(ds.annotations.iter().all(|a| a.source == Source::Human));

    let boot: usize = ds
        .partitions
        .bootstrapping
        .iter()
        .map(|&id| ds.annotations_of(id).count())
        .sum();
    assert_eq!(boot, 1);
    for im in ds.images_in(Partition::Training) {
        if !ds.partitions.bootstrapping.contains(&im.id) {
            assert_eq!(ds.annotations_of(im.id).count(), 0);
        }
    }

    // One fully annotated test scene per regime, regenerated independently.
    let test_ids: Vec<u64> = ds.partitions.testing.iter().copied().collect();
    for (k, mode) in OverlapMode::ALL.into_iter().enumerate() {
        let index = (2 + 6 + k) as u64;
        let scene = generate_scene(&spec.scene(mode, index)).unwrap();
        let masks: Vec<BinaryMask> = ds
            .annotations_of(test_ids[k])
            .map(|a| rle_decode(&a.mask).unwrap())
            .collect();
        let expected: Vec<BinaryMask> = scene.instances.iter().map(|i| i.mask.clone()).collect();
        assert_eq!(masks, expected, "test scene {k}");
    }

    let reloaded = load_coco(dir.path().join(DATASET_FILE)).unwrap();
    assert_eq!(reloaded.annotations.len(), ds.annotations.len());
    assert_eq!(reloaded.partitions, ds.partitions);
    for im in &ds.images {
        assert!(dir.path().join(&im.file_path).is_file());
    }
}

#[test]
fn bootstrap_annotations_spread_round_robin() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_experiment(&ExperimentSpec::coffee(5, 0, 1), dir.path()).unwrap();
    let per: Vec<usize> = ds
        .partitions
        .bootstrapping
        .iter()
        .map(|&id| ds.annotations_of(id).count())
        .collect();
    assert_eq!(per, vec![3, 2]);
}

#[test]
fn experiments_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = ExperimentSpec::fruits(4, 2, 8);
    generate_experiment(&spec, a.path()).unwrap();
    generate_experiment(&spec, b.path()).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, DATASET_FILE), read(&b, DATASET_FILE));
    assert_eq!(read(&a, "images/0001.png"), read(&b, "images/0001.png"));
}
