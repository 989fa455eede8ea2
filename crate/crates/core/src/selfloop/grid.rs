use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{best_iteration, run_loop, LoopError, RunConfig};
use crate::data::{AnnotatedDataset, AnnotationId, ImageId};
use crate::detector::ImageStore;
use crate::seeds::mix_seed;

pub const GRID_FILE: &str = "grid.csv";

/// Axes of a hyperparameter grid. `annotations` subsamples the human
/// bootstrap annotations; `None` keeps them all.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GridSpec {
    pub annotations: Option<Vec<u32>>,
    pub thresholds: Vec<f64>,
    pub epochs: Vec<u32>,
}

impl GridSpec {
    /// Cells in row-major order: annotations, then thresholds, then epochs.
    pub fn cells(&self) -> Vec<(Option<u32>, f64, u32)> {
        let annotations: Vec<Option<u32>> = match &self.annotations {
            Some(a) => a.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let mut cells = Vec::new();
        for &a in &annotations {
            for &t in &self.thresholds {
                for &e in &self.epochs {
                    cells.push((a, t, e));
                }
            }
        }
        cells
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty() || self.epochs.is_empty() || self.annotations.as_ref().is_some_and(Vec::is_empty)
    }
}

/// One `grid.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: usize,
    pub annotations: Option<u32>,
    pub threshold: f64,
    pub epochs: u32,
    pub seed: u64,
    pub best_iteration: Option<u32>,
    pub ap75: Option<f64>,
    pub ar75: Option<f64>,
    /// Detected instances on the testing partition after the last iteration.
    pub n_instances: Option<usize>,
    pub n_gt: Option<usize>,
    /// `ok` or `failed: <reason>`.
    pub status: String,
}

/// Keeps `n` of the human bootstrap annotations, picked round-robin over
/// the bootstrap images from seeded shuffles. Other annotations are kept.
pub fn subsample_bootstrap(dataset: &AnnotatedDataset, n: u32, seed: u64) -> Result<AnnotatedDataset, LoopError> {
    let boot = &dataset.partitions.bootstrapping;
    let mut per_image: BTreeMap<ImageId, Vec<AnnotationId>> = BTreeMap::new();
    for a in dataset
        .annotations
        .iter()
        .filter(|a| boot.contains(&a.image_id) && a.source.is_human())
    {
        per_image.entry(a.image_id).or_default().push(a.id);
    }
    let available: usize = per_image.values().map(Vec::len).sum();
    if n == 0 || n as usize > available {
        return Err(LoopError::Config(format!(
            "cannot keep {n} bootstrap annotations out of {available}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<Vec<AnnotationId>> = per_image
        .into_values()
        .map(|mut ids| {
            ids.shuffle(&mut rng);
            ids
        })
        .collect();
    let mut keep = std::collections::BTreeSet::new();
    while keep.len() < n as usize {
        for q in queues.iter_mut() {
            if keep.len() == n as usize {
                break;
            }
            if let Some(id) = q.pop() {
                keep.insert(id);
            }
        }
    }
    let mut out = dataset.clone();
    out.annotations
        .retain(|a| !(boot.contains(&a.image_id) && a.source.is_human()) || keep.contains(&a.id));
    Ok(out)
}

/// Runs one loop per grid cell, in parallel, each in `out_dir/cells/NNN`,
/// and writes `out_dir/grid.csv`. Cell `i` uses seed `mix_seed(base.seed, i)`;
/// annotation subsets depend only on the annotation count, so rows with the
/// same count share the same bootstrap labels. A failing cell yields a
/// failed row instead of aborting the grid.
pub fn grid_search(
    base: &RunConfig,
    grid: &GridSpec,
    dataset: &AnnotatedDataset,
    store: Arc<ImageStore>,
    out_dir: &Path,
) -> Result<Vec<GridRow>, LoopError> {
    if grid.is_empty() {
        return Err(LoopError::EmptyGrid);
    }
    base.validate()?;
    fs::create_dir_all(out_dir)?;
    let cells = grid.cells();
    let rows: Vec<GridRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(annotations, threshold, epochs))| {
            let seed = mix_seed(base.seed, i as u64);
            let mut row = GridRow {
                cell: i,
                annotations,
                threshold,
                epochs,
                seed,
                best_iteration: None,
                ap75: None,
                ar75: None,
                n_instances: None,
                n_gt: None,
                status: "ok".into(),
            };
            let outcome = (|| {
                let config = RunConfig {
                    threshold,
                    epochs,
                    seed,
                    ..base.clone()
                };
                config.validate()?;
                let data = match annotations {
                    Some(n) => subsample_bootstrap(dataset, n, mix_seed(base.seed ^ 0x5eed, n as u64))?,
                    None => dataset.clone(),
                };
                let cell_dir = out_dir.join("cells").join(format!("{i:03}"));
                run_loop(&config, data, store.clone(), Some(&cell_dir))
            })();
            match outcome {
                Ok(state) => {
                    let best = best_iteration(&state.history);
                    row.best_iteration = best.map(|r| r.iteration);
                    row.ap75 = best.and_then(|r| r.metrics.as_ref()).map(|m| m.ap75);
                    row.ar75 = best.and_then(|r| r.metrics.as_ref()).map(|m| m.ar75);
                    let last = state.history.last().and_then(|r| r.metrics.as_ref());
                    row.n_instances = last.map(|m| m.n_detected);
                    row.n_gt = last.map(|m| m.n_gt);
                }
                Err(e) => {
                    log::warn!("grid cell {i} failed: {e}");
                    row.status = format!("failed: {e}");
                }
            }
            row
        })
        .collect();
    let mut w = csv::Writer::from_path(out_dir.join(GRID_FILE)).map_err(|e| LoopError::RunDir(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| LoopError::RunDir(e.to_string()))?;
    }
    w.flush()?;
    Ok(rows)
}
