//! The iterative self-learning loop.
//!
//! Round 0 trains on the human bootstrap annotations. Every later round
//! infers on the training partition, keeps post-NMS detections with
//! confidence at least the threshold as pseudo-labels, replaces the previous
//! round's pseudo-labels with them, and continues training the same
//! detector. Each round is evaluated on the testing partition and
//! checkpointed so any round can be restored and resumed bit-exactly.

mod config;
mod grid;
mod loio;
mod rundir;

pub use config::RunConfig;
pub use grid::{grid_search, subsample_bootstrap, GridRow, GridSpec, GRID_FILE};
pub use loio::{fully_annotated, loio_eval, LoioRow, LoioSpec, LOIO_FILE};
pub use rundir::{
    iteration_dir, read_manifest, read_metrics_csv, write_metrics_csv, MetricsRow, RunManifest, RunSummary,
    ANNOTATIONS_FILE, ITERATIONS_DIR, MANIFEST_FILE, METRICS_FILE, RECORD_FILE, STATE_FILE, SUMMARY_FILE,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotatedDataset, Annotation, DataError, Detection, ImageId, ImageRecord, Source};
use crate::detector::{DetectorError, DetectorHandle, DetectorStateBlob, ImageStore, TrainJob};
use crate::eval::{evaluate_dataset, postprocess, EvalError, MetricsRecord};
use crate::seeds::mix_seed;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("the bootstrapping partition has no human annotations")]
    NoBootstrap,
    #[error("no checkpoint for iteration {0}")]
    MissingCheckpoint(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty grid: every axis needs at least one value")]
    EmptyGrid,
    #[error("leave-one-image-out needs at least two annotated images, found {0}")]
    TooFewImages(usize),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("corrupt run directory: {0}")]
    RunDir(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Outcome of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Pseudo-labels promoted this round; 0 for the bootstrap round.
    pub promoted: usize,
    /// Post-NMS detections on training images before thresholding.
    pub n_inferred: usize,
    /// Whether the detector was trained this round.
    pub trained: bool,
    pub trained_steps: u64,
    pub presentations: u64,
    /// Present when the dataset has a testing partition.
    pub metrics: Option<MetricsRecord>,
    pub wall_ms: u64,
    /// SHA-256 of the detector state after the round.
    pub digest: String,
    pub warning: Option<String>,
}

/// Keeps exactly the detections with confidence at least `threshold`, in order.
pub fn filter_detections(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.confidence >= threshold)
        .cloned()
        .collect()
}

/// Index of the record with the highest AP75, earliest on ties.
pub fn best_iteration(history: &[IterationRecord]) -> Option<&IterationRecord> {
    history
        .iter()
        .filter(|r| r.metrics.is_some())
        .fold(None, |best: Option<&IterationRecord>, r| match best {
            Some(b) if b.metrics.as_ref().unwrap().ap75 >= r.metrics.as_ref().unwrap().ap75 => Some(b),
            _ => Some(r),
        })
}

/// A live run.
#[derive(Debug)]
pub struct RunState {
    pub config: RunConfig,
    /// Current annotations, pseudo-labels included.
    pub dataset: AnnotatedDataset,
    pub detector: DetectorHandle,
    pub history: Vec<IterationRecord>,
    pub run_dir: Option<PathBuf>,
}

impl RunState {
    pub fn store(&self) -> &Arc<ImageStore> {
        self.detector.store()
    }

    pub fn next_iteration(&self) -> u32 {
        self.history.len() as u32
    }

    fn training_images(&self) -> Vec<ImageRecord> {
        self.dataset
            .images
            .iter()
            .filter(|im| self.dataset.partitions.training.contains(&im.id))
            .cloned()
            .collect()
    }

    fn testing_images(&self) -> Vec<ImageRecord> {
        self.dataset
            .images
            .iter()
            .filter(|im| self.dataset.partitions.testing.contains(&im.id))
            .cloned()
            .collect()
    }

    /// Training job over every training image that carries an annotation.
    fn job(&self, iteration: u32, human_only: bool) -> TrainJob {
        let by_image = self.dataset.annotations_by_image();
        let parts = &self.dataset.partitions;
        let images = self
            .dataset
            .images
            .iter()
            .filter(|im| parts.bootstrapping.contains(&im.id) || (!human_only && parts.training.contains(&im.id)))
            .filter_map(|im| {
                let anns: Vec<Annotation> = by_image
                    .get(&im.id)
                    .into_iter()
                    .flatten()
                    .filter(|a| !human_only || a.source.is_human())
                    .map(|a| (*a).clone())
                    .collect();
                (!anns.is_empty()).then(|| (im.clone(), anns))
            })
            .collect();
        TrainJob {
            images,
            epochs: self.config.epochs,
            batch_size: self.config.batch_size,
            steps_per_epoch: self.config.steps_per_epoch,
            seed: mix_seed(self.config.seed, iteration as u64),
            augment: self.config.augment,
        }
    }

    /// Scores thresholded detections on the testing partition.
    fn evaluate(&self, iteration: u32) -> Result<Option<MetricsRecord>, LoopError> {
        let testing = self.testing_images();
        if testing.is_empty() {
            return Ok(None);
        }
        let detections = filter_detections(&self.detector.infer(&testing)?, self.config.threshold);
        Ok(Some(evaluate_dataset(
            &self.dataset,
            &detections,
            &self.config.eval_params(),
            iteration,
        )?))
    }

    fn record(
        &mut self,
        iteration: u32,
        promoted: usize,
        n_inferred: usize,
        trained: bool,
        started: Instant,
        warning: Option<String>,
    ) -> Result<(), LoopError> {
        let metrics = self.evaluate(iteration)?;
        let record = IterationRecord {
            iteration,
            promoted,
            n_inferred,
            trained,
            trained_steps: self.detector.trained_steps(),
            presentations: self.detector.presentations(),
            metrics,
            wall_ms: if self.config.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            digest: self.detector.digest()?,
            warning,
        };
        if let Some(w) = &record.warning {
            log::warn!("iteration {iteration}: {w}");
        }
        log::info!(
            "iteration {iteration}: promoted {promoted}, AP75 {}",
            record
                .metrics
                .as_ref()
                .map_or("n/a".into(), |m| format!("{:.4}", m.ap75))
        );
        self.history.push(record);
        if let Some(dir) = &self.run_dir {
            rundir::write_checkpoint(dir, self)?;
        }
        Ok(())
    }
}

fn open_handle(
    config: &RunConfig,
    store: Arc<ImageStore>,
    pretrained: Option<&DetectorStateBlob>,
) -> Result<DetectorHandle, LoopError> {
    Ok(DetectorHandle::open_with(
        config.detector_kind()?,
        store,
        pretrained,
        config.seed,
        config.detector_params(),
    )?)
}

/// Trains the detector on the human bootstrap annotations and records
/// iteration 0. With `run_dir`, writes the manifest and checkpoint 0.
pub fn bootstrap_phase(
    config: &RunConfig,
    dataset: AnnotatedDataset,
    store: Arc<ImageStore>,
    run_dir: Option<&Path>,
    pretrained: Option<&DetectorStateBlob>,
) -> Result<RunState, LoopError> {
    config.validate()?;
    let started = Instant::now();
    let detector = open_handle(config, store.clone(), pretrained)?;
    let mut state = RunState {
        config: config.clone(),
        dataset,
        detector,
        history: Vec::new(),
        run_dir: run_dir.map(Path::to_path_buf),
    };
    let job = state.job(0, true);
    if job.images.is_empty() {
        return Err(LoopError::NoBootstrap);
    }
    if let Some(dir) = run_dir {
        rundir::write_manifest(dir, config, store.root())?;
    }
    state.detector.train(&job)?;
    state.record(0, 0, 0, true, started, None)?;
    Ok(state)
}

/// Runs one infer, filter, replace, train, evaluate, checkpoint round.
pub fn iterate_once(state: &mut RunState) -> Result<(), LoopError> {
    let started = Instant::now();
    let iteration = state.next_iteration();
    let config = state.config.clone();
    let training = state.training_images();
    let training_ids: BTreeSet<ImageId> = training.iter().map(|im| im.id).collect();

    let raw = state.detector.infer(&training)?;
    let (post_nms, n_inferred) = postprocess(&raw, &training_ids, &config.eval_params())?;
    let survivors = filter_detections(&post_nms, config.threshold);

    // Preserved: testing ground truth, plus human labels on training images
    // when they are kept.
    let preserved: Vec<Annotation> = state
        .dataset
        .annotations
        .iter()
        .filter(|a| !training_ids.contains(&a.image_id) || (config.keep_bootstrap_annotations && a.source.is_human()))
        .cloned()
        .collect();
    let mut human_by_image: BTreeMap<ImageId, Vec<&Annotation>> = BTreeMap::new();
    for a in preserved.iter().filter(|a| training_ids.contains(&a.image_id)) {
        human_by_image.entry(a.image_id).or_default().push(a);
    }
    let mut next_id = preserved.iter().map(|a| a.id).max().map_or(1, |m| m + 1);
    let mut promoted = Vec::new();
    for d in &survivors {
        let shadowed = human_by_image
            .get(&d.image_id)
            .is_some_and(|hs| hs.iter().any(|h| h.mask.iou_or_zero(&d.mask) > config.nms_iou));
        if shadowed {
            continue;
        }
        promoted.push(Annotation::new(
            next_id,
            d.image_id,
            d.category_id,
            d.mask.clone(),
            Source::Inferred(iteration),
            d.confidence,
        ));
        next_id += 1;
    }
    let n_promoted = promoted.len();
    state.dataset.annotations = preserved;
    state.dataset.annotations.extend(promoted);
    state.dataset.sort();

    let mut warning = None;
    let trained = if n_promoted == 0 {
        warning = Some(format!(
            "no detection reached confidence {}; training skipped",
            config.threshold
        ));
        false
    } else {
        let job = state.job(iteration, false);
        if config.cold_restart {
            state.detector = open_handle(&config, state.store().clone(), None)?;
        }
        state.detector.train(&job)?;
        true
    };
    state.record(iteration, n_promoted, n_inferred, trained, started, warning)
}

/// Continues a run until it has `config.iterations` self-learning rounds.
pub fn continue_run(state: &mut RunState) -> Result<(), LoopError> {
    while state.next_iteration() <= state.config.iterations {
        iterate_once(state)?;
    }
    if let Some(dir) = &state.run_dir {
        rundir::write_summary(dir, &state.history)?;
    }
    Ok(())
}

/// Bootstraps and iterates. With `out_dir`, the run directory receives the
/// manifest, per-iteration checkpoints, `metrics.csv` and `summary.json`.
pub fn run_loop(
    config: &RunConfig,
    dataset: AnnotatedDataset,
    store: Arc<ImageStore>,
    out_dir: Option<&Path>,
) -> Result<RunState, LoopError> {
    let mut state = bootstrap_phase(config, dataset, store, out_dir, None)?;
    continue_run(&mut state)?;
    Ok(state)
}

/// Rebuilds the live state as it was right after iteration `k`.
///
/// Later checkpoints are left on disk until resumed iterations overwrite
/// them.
pub fn restore_run(run_dir: &Path, k: u32) -> Result<RunState, LoopError> {
    let manifest = rundir::read_manifest(run_dir)?;
    let store = Arc::new(ImageStore::new(&manifest.image_root));
    restore_run_with(run_dir, k, store)
}

/// Like [`restore_run`] with a caller-supplied image store.
pub fn restore_run_with(run_dir: &Path, k: u32, store: Arc<ImageStore>) -> Result<RunState, LoopError> {
    let manifest = rundir::read_manifest(run_dir)?;
    let config = manifest.config;
    config.validate()?;
    let dir = rundir::iteration_dir(run_dir, k);
    if !dir.join(STATE_FILE).is_file() || !dir.join(ANNOTATIONS_FILE).is_file() {
        return Err(LoopError::MissingCheckpoint(k));
    }
    let history = (0..=k)
        .map(|i| rundir::read_record(run_dir, i))
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = crate::data::load_coco(dir.join(ANNOTATIONS_FILE))?;
    let blob = DetectorStateBlob::load(dir.join(STATE_FILE))?;
    let detector = open_handle(&config, store, Some(&blob))?;
    if detector.digest()? != history[k as usize].digest {
        return Err(LoopError::RunDir(format!(
            "detector state of iteration {k} does not match its record"
        )));
    }
    Ok(RunState {
        config,
        dataset,
        detector,
        history,
        run_dir: Some(run_dir.to_path_buf()),
    })
}
