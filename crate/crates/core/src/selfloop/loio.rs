use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{best_iteration, run_loop, LoopError, RunConfig};
use crate::data::{make_partitions, AnnotatedDataset, AnnotationId, CategoryId, ImageId, PartitionSpec};
use crate::detector::ImageStore;
use crate::seeds::mix_seed;

pub const LOIO_FILE: &str = "loio.csv";

/// How each holdout's bootstrap set is drawn from the remaining images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoioSpec {
    /// Remaining images that become bootstrap images.
    pub bootstrap_images: usize,
    /// Human annotations kept per category across the bootstrap images.
    pub annotations_per_category: u32,
}

impl Default for LoioSpec {
    fn default() -> Self {
        Self {
            bootstrap_images: 1,
            annotations_per_category: 1,
        }
    }
}

/// Best-iteration metrics of one holdout run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoioRow {
    pub holdout: ImageId,
    pub seed: u64,
    pub best_iteration: Option<u32>,
    pub ap75: Option<f64>,
    pub ar75: Option<f64>,
    pub n_detected: Option<usize>,
    pub n_gt: Option<usize>,
}

/// Images treated as fully annotated: the testing partition when it is not
/// empty, otherwise every image with a human annotation.
pub fn fully_annotated(dataset: &AnnotatedDataset) -> Vec<ImageId> {
    let human: BTreeSet<ImageId> = dataset
        .annotations
        .iter()
        .filter(|a| a.source.is_human())
        .map(|a| a.image_id)
        .collect();
    if dataset.partitions.testing.is_empty() {
        human.into_iter().collect()
    } else {
        dataset
            .partitions
            .testing
            .iter()
            .copied()
            .filter(|id| human.contains(id))
            .collect()
    }
}

/// Holds out each fully annotated image (see [`fully_annotated`]) in turn.
///
/// For holdout `m` (the `j`-th such image by id) the testing partition
/// is `{m}`, every other image trains, and the bootstrap set is drawn from
/// the other annotated images with seed `mix_seed(config.seed, j)`. Runs go
/// to `out_dir/holdout_<id>`; the table goes to `out_dir/loio.csv`.
pub fn loio_eval(
    config: &RunConfig,
    spec: &LoioSpec,
    dataset: &AnnotatedDataset,
    store: Arc<ImageStore>,
    out_dir: &Path,
) -> Result<Vec<LoioRow>, LoopError> {
    config.validate()?;
    let annotated = fully_annotated(dataset);
    if annotated.len() < 2 {
        return Err(LoopError::TooFewImages(annotated.len()));
    }
    if spec.bootstrap_images == 0 || spec.bootstrap_images >= annotated.len() || spec.annotations_per_category == 0 {
        return Err(LoopError::Config(format!(
            "need 1..{} bootstrap images and at least one annotation per category",
            annotated.len() - 1
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (j, &holdout) in annotated.iter().enumerate() {
        let seed = mix_seed(config.seed, j as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut others: Vec<ImageId> = annotated.iter().copied().filter(|&id| id != holdout).collect();
        others.shuffle(&mut rng);
        let bootstrapping: Vec<ImageId> = others[..spec.bootstrap_images].to_vec();
        let parts = PartitionSpec {
            bootstrapping: bootstrapping.clone(),
            training: dataset
                .images
                .iter()
                .map(|im| im.id)
                .filter(|&id| id != holdout)
                .collect(),
            testing: vec![holdout],
            bootstrap_in_training: true,
        };
        let mut data = make_partitions(dataset, &parts)?;
        keep_per_category(&mut data, &bootstrapping, spec.annotations_per_category, &mut rng);
        let run_config = RunConfig { seed, ..config.clone() };
        let state = run_loop(
            &run_config,
            data,
            store.clone(),
            Some(&out_dir.join(format!("holdout_{holdout}"))),
        )?;
        let best = best_iteration(&state.history);
        let metrics = best.and_then(|r| r.metrics.as_ref());
        rows.push(LoioRow {
            holdout,
            seed,
            best_iteration: best.map(|r| r.iteration),
            ap75: metrics.map(|m| m.ap75),
            ar75: metrics.map(|m| m.ar75),
            n_detected: metrics.map(|m| m.n_detected),
            n_gt: metrics.map(|m| m.n_gt),
        });
    }
    let mut w = csv::Writer::from_path(out_dir.join(LOIO_FILE)).map_err(|e| LoopError::RunDir(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| LoopError::RunDir(e.to_string()))?;
    }
    w.flush()?;
    Ok(rows)
}

/// Keeps at most `n` human annotations per category on the bootstrap images.
fn keep_per_category(data: &mut AnnotatedDataset, bootstrapping: &[ImageId], n: u32, rng: &mut ChaCha8Rng) {
    let mut per_cat: BTreeMap<CategoryId, Vec<AnnotationId>> = BTreeMap::new();
    for a in data.annotations.iter().filter(|a| bootstrapping.contains(&a.image_id)) {
        per_cat.entry(a.category_id).or_default().push(a.id);
    }
    let mut keep = BTreeSet::new();
    for ids in per_cat.values_mut() {
        ids.shuffle(rng);
        keep.extend(ids.iter().take(n as usize).copied());
    }
    data.annotations
        .retain(|a| !bootstrapping.contains(&a.image_id) || keep.contains(&a.id));
}
