use std::fs;
use std::path::Path;
use std::sync::Arc;

use bootseg::data::{load_coco, AnnotatedDataset, Detection, Source};
use bootseg::detector::ImageStore;
use bootseg::mask::{rle_encode, BinaryMask};
use bootseg::seeds::mix_seed;
use bootseg::selfloop::{
    bootstrap_phase, continue_run, filter_detections, grid_search, iterate_once, iteration_dir, loio_eval, restore_run,
    run_loop, GridSpec, LoioSpec, LoopError, RunConfig, ANNOTATIONS_FILE, METRICS_FILE,
};
use bootseg::synth::{generate_experiment, ExperimentSpec};
use proptest::prelude::*;
use tempfile::TempDir;

struct Experiment {
    _dir: TempDir,
    dataset: AnnotatedDataset,
    store: Arc<ImageStore>,
}

fn experiment(training: u32, seed: u64) -> Experiment {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_experiment(&ExperimentSpec::coffee(3, training, seed), dir.path()).unwrap();
    let store = Arc::new(ImageStore::new(dir.path()));
    Experiment {
        _dir: dir,
        dataset,
        store,
    }
}

fn config(iterations: u32, epochs: u32) -> RunConfig {
    RunConfig {
        iterations,
        epochs,
        ..RunConfig::default()
    }
}

#[test]
fn records_bootstrap_plus_each_iteration() {
    let ex = experiment(4, 1);
    let state = run_loop(&config(2, 1), ex.dataset.clone(), ex.store.clone(), None).unwrap();
    let iterations: Vec<u32> = state.history.iter().map(|r| r.iteration).collect();
    assert_eq!(iterations, vec![0, 1, 2]);
    assert!(state.history.iter().all(|r| r.metrics.is_some()));
    assert_eq!(state.history[0].promoted, 0);
}

#[test]
fn zero_iterations_is_bootstrap_only() {
    let ex = experiment(2, 2);
    let dir = tempfile::tempdir().unwrap();
    let state = run_loop(&config(0, 1), ex.dataset.clone(), ex.store.clone(), Some(dir.path())).unwrap();
    assert_eq!(state.history.len(), 1);
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn bootstrap_of_four_epochs_presents_192_images() {
    let ex = experiment(2, 3);
    let state = bootstrap_phase(&config(0, 4), ex.dataset.clone(), ex.store.clone(), None, None).unwrap();
    assert_eq!(state.history[0].presentations, 192);
    assert_eq!(state.history[0].trained_steps, 96);
}

#[test]
fn missing_bootstrap_labels_are_rejected() {
    let ex = experiment(2, 4);
    let mut ds = ex.dataset.clone();
    let boot = ds.partitions.bootstrapping.clone();
    ds.annotations.retain(|a| !boot.contains(&a.image_id));
    let err = run_loop(&config(1, 1), ds, ex.store.clone(), None).unwrap_err();
    assert!(matches!(err, LoopError::NoBootstrap), "{err:?}");
}

#[test]
fn out_of_range_threshold_is_a_config_error() {
    let ex = experiment(2, 4);
    let cfg = RunConfig {
        threshold: 1.01,
        ..config(1, 1)
    };
    assert!(matches!(
        run_loop(&cfg, ex.dataset.clone(), ex.store.clone(), None),
        Err(LoopError::Config(_))
    ));
}

#[test]
fn unreachable_threshold_skips_training() {
    let ex = experiment(4, 5);
    let mut state = bootstrap_phase(&config(1, 2), ex.dataset.clone(), ex.store.clone(), None, None).unwrap();
    let boot = state.history[0].clone();
    state.config.threshold = 1.01;
    iterate_once(&mut state).unwrap();
    let r = &state.history[1];
    assert_eq!(r.promoted, 0);
    assert!(!r.trained);
    assert!(r.warning.is_some());
    assert_eq!(r.trained_steps, boot.trained_steps);
    assert_eq!(r.digest, boot.digest);
    assert!(state.dataset.annotations.iter().all(|a| a.source == Source::Human));
}

#[test]
fn pseudo_labels_are_replaced_each_round() {
    let ex = experiment(4, 6);
    let human_before: Vec<_> = ex.dataset.annotations.clone();
    let mut state = bootstrap_phase(&config(2, 2), ex.dataset.clone(), ex.store.clone(), None, None).unwrap();
    for k in 1..=2 {
        iterate_once(&mut state).unwrap();
        let inferred: Vec<_> = state
            .dataset
            .annotations
            .iter()
            .filter(|a| !a.source.is_human())
            .collect();
        assert_eq!(inferred.len(), state.history[k as usize].promoted);
        assert!(inferred.iter().all(|a| a.source == Source::Inferred(k)));
        assert!(inferred.iter().all(|a| a.confidence >= state.config.threshold));
        assert!(inferred
            .iter()
            .all(|a| state.dataset.partitions.training.contains(&a.image_id)));
        let human: Vec<_> = state
            .dataset
            .annotations
            .iter()
            .filter(|a| a.source.is_human())
            .cloned()
            .collect();
        assert_eq!(human, human_before);
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let ex = experiment(4, 7);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_loop(&config(2, 1), ex.dataset.clone(), ex.store.clone(), Some(a.path())).unwrap();
    run_loop(&config(2, 1), ex.dataset.clone(), ex.store.clone(), Some(b.path())).unwrap();
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), METRICS_FILE), read(b.path(), METRICS_FILE));
    let last = iteration_dir(Path::new(""), 2).join(ANNOTATIONS_FILE);
    assert_eq!(
        read(a.path(), last.to_str().unwrap()),
        read(b.path(), last.to_str().unwrap())
    );
}

fn snapshot(dir: &Path, last: u32) -> (Vec<u8>, Vec<u8>) {
    (
        fs::read(dir.join(METRICS_FILE)).unwrap(),
        fs::read(iteration_dir(dir, last).join(ANNOTATIONS_FILE)).unwrap(),
    )
}

#[test]
fn restored_runs_resume_identically() {
    let ex = experiment(4, 8);
    let dir = tempfile::tempdir().unwrap();
    run_loop(&config(3, 1), ex.dataset.clone(), ex.store.clone(), Some(dir.path())).unwrap();
    let original = snapshot(dir.path(), 3);
    for k in [0, 1, 3] {
        let mut state = restore_run(dir.path(), k).unwrap();
        assert_eq!(state.history.len(), k as usize + 1);
        let ann = load_coco(iteration_dir(dir.path(), k).join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(state.dataset.annotations, ann.annotations);
        continue_run(&mut state).unwrap();
        assert_eq!(snapshot(dir.path(), 3), original, "resume from {k}");
    }
    assert!(matches!(
        restore_run(dir.path(), 4),
        Err(LoopError::MissingCheckpoint(4))
    ));
}

#[test]
fn grid_rows_follow_cell_order() {
    let ex = experiment(2, 9);
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec {
        annotations: None,
        thresholds: vec![0.25, 0.5, 0.75],
        epochs: vec![1],
    };
    let base = config(1, 1);
    let rows = grid_search(&base, &grid, &ex.dataset, ex.store.clone(), dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.cell, i);
        assert_eq!(row.threshold, [0.25, 0.5, 0.75][i]);
        assert_eq!(row.seed, mix_seed(base.seed, i as u64));
        assert_eq!(row.status, "ok");
        assert!(row.best_iteration.is_some() && row.ap75.is_some());
    }
    let csv = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().next().unwrap().contains("best_iteration"));
    let empty = GridSpec {
        annotations: None,
        thresholds: vec![],
        epochs: vec![1],
    };
    assert!(matches!(
        grid_search(&base, &empty, &ex.dataset, ex.store.clone(), dir.path()),
        Err(LoopError::EmptyGrid)
    ));
}

#[test]
fn loio_holds_out_each_test_image() {
    let ex = experiment(1, 10);
    let dir = tempfile::tempdir().unwrap();
    let rows = loio_eval(
        &config(1, 1),
        &LoioSpec::default(),
        &ex.dataset,
        ex.store.clone(),
        dir.path(),
    )
    .unwrap();
    let holdouts: Vec<u64> = rows.iter().map(|r| r.holdout).collect();
    assert_eq!(
        holdouts,
        ex.dataset.partitions.testing.iter().copied().collect::<Vec<_>>()
    );
    for (j, r) in rows.iter().enumerate() {
        assert_eq!(r.seed, mix_seed(0, j as u64));
        assert_eq!(r.n_gt, Some(ex.dataset.annotations_of(r.holdout).count()));
    }
    let mut one = ex.dataset.clone();
    let keep = *one.partitions.testing.iter().next().unwrap();
    one.partitions.testing.retain(|&id| id == keep);
    assert!(matches!(
        loio_eval(&config(1, 1), &LoioSpec::default(), &one, ex.store.clone(), dir.path()),
        Err(LoopError::TooFewImages(1))
    ));
}

fn detection(confidence: f64) -> Detection {
    Detection {
        image_id: 1,
        category_id: 1,
        mask: rle_encode(&BinaryMask::from_fn(4, 4, |r, _| r == 0)),
        confidence,
    }
}

#[test]
fn fixed_detections_thin_out_with_threshold() {
    let dets: Vec<Detection> = [0.1, 0.3, 0.55, 0.6, 0.9, 0.25, 0.75]
        .into_iter()
        .map(detection)
        .collect();
    let kept: Vec<usize> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&t| filter_detections(&dets, t).len())
        .collect();
    assert_eq!(kept, vec![6, 4, 2]);
    assert!(filter_detections(&dets, 1.01).is_empty());
}

proptest! {
    #[test]
    fn filter_laws(confs in prop::collection::vec(0.0f64..=1.0, 0..30), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let dets: Vec<Detection> = confs.into_iter().map(detection).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = filter_detections(&dets, lo);
        let b = filter_detections(&dets, hi);
        prop_assert!(b.len() <= a.len());
        prop_assert!(b.iter().all(|d| a.contains(d)));
        prop_assert!(a.iter().all(|d| dets.contains(d) && d.confidence >= lo));
        prop_assert_eq!(filter_detections(&a, lo), a.clone());
        prop_assert_eq!(dets.iter().filter(|d| d.confidence >= lo).count(), a.len());
    }
}
