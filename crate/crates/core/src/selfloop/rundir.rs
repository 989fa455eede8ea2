//! Run directory layout:
//!
//! ```text
//! run.toml                       config snapshot and image root
//! iterations/NNN/annotations.json
//! iterations/NNN/detector.state
//! iterations/NNN/record.json
//! metrics.csv
//! summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{best_iteration, IterationRecord, LoopError, RunConfig, RunState};
use crate::data::save_coco;

pub const MANIFEST_FILE: &str = "run.toml";
pub const ITERATIONS_DIR: &str = "iterations";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const STATE_FILE: &str = "detector.state";
pub const RECORD_FILE: &str = "record.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub image_root: PathBuf,
    pub config: RunConfig,
}

/// One `metrics.csv` row; metric cells are empty without a testing partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u32,
    pub ap75: Option<f64>,
    pub ar75: Option<f64>,
    #[serde(rename = "n_detected_instances")]
    pub n_detected: Option<usize>,
    #[serde(rename = "n_ground_truth")]
    pub n_gt: Option<usize>,
    pub promoted: usize,
    pub wall_ms: u64,
}

impl From<&IterationRecord> for MetricsRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iteration: r.iteration,
            ap75: r.metrics.as_ref().map(|m| m.ap75),
            ar75: r.metrics.as_ref().map(|m| m.ar75),
            n_detected: r.metrics.as_ref().map(|m| m.n_detected),
            n_gt: r.metrics.as_ref().map(|m| m.n_gt),
            promoted: r.promoted,
            wall_ms: r.wall_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: u32,
    pub best_iteration: Option<u32>,
    pub best_ap75: Option<f64>,
    pub best_ar75: Option<f64>,
    pub final_n_detected: Option<usize>,
    pub n_gt: Option<usize>,
}

impl RunSummary {
    pub fn from_history(history: &[IterationRecord]) -> Self {
        let best = best_iteration(history);
        let last = history.last().and_then(|r| r.metrics.as_ref());
        Self {
            iterations: history.len().saturating_sub(1) as u32,
            best_iteration: best.map(|r| r.iteration),
            best_ap75: best.and_then(|r| r.metrics.as_ref()).map(|m| m.ap75),
            best_ar75: best.and_then(|r| r.metrics.as_ref()).map(|m| m.ar75),
            final_n_detected: last.map(|m| m.n_detected),
            n_gt: last.map(|m| m.n_gt),
        }
    }
}

pub fn iteration_dir(run_dir: &Path, k: u32) -> PathBuf {
    run_dir.join(ITERATIONS_DIR).join(format!("{k:03}"))
}

pub(crate) fn write_manifest(run_dir: &Path, config: &RunConfig, image_root: &Path) -> Result<(), LoopError> {
    fs::create_dir_all(run_dir)?;
    let root = std::path::absolute(image_root)?;
    let manifest = RunManifest {
        image_root: root,
        config: config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| LoopError::RunDir(e.to_string()))?;
    fs::write(run_dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest, LoopError> {
    let path = run_dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| LoopError::RunDir(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| LoopError::RunDir(format!("{}: {e}", path.display())))
}

pub(crate) fn write_checkpoint(run_dir: &Path, state: &RunState) -> Result<(), LoopError> {
    let record = state.history.last().expect("checkpoint after a record");
    let dir = iteration_dir(run_dir, record.iteration);
    fs::create_dir_all(&dir)?;
    save_coco(&state.dataset, dir.join(ANNOTATIONS_FILE))?;
    state.detector.checkpoint()?.save(dir.join(STATE_FILE))?;
    let json = serde_json::to_string_pretty(record).map_err(|e| LoopError::RunDir(e.to_string()))?;
    fs::write(dir.join(RECORD_FILE), json + "\n")?;
    write_metrics_csv(run_dir.join(METRICS_FILE), &state.history)
}

pub(crate) fn read_record(run_dir: &Path, k: u32) -> Result<IterationRecord, LoopError> {
    let path = iteration_dir(run_dir, k).join(RECORD_FILE);
    let text = fs::read_to_string(&path).map_err(|_| LoopError::MissingCheckpoint(k))?;
    let record: IterationRecord =
        serde_json::from_str(&text).map_err(|e| LoopError::RunDir(format!("{}: {e}", path.display())))?;
    if record.iteration != k {
        return Err(LoopError::RunDir(format!(
            "{} records iteration {}",
            path.display(),
            record.iteration
        )));
    }
    Ok(record)
}

pub(crate) fn write_summary(run_dir: &Path, history: &[IterationRecord]) -> Result<(), LoopError> {
    let json = serde_json::to_string_pretty(&RunSummary::from_history(history))
        .map_err(|e| LoopError::RunDir(e.to_string()))?;
    fs::write(run_dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(())
}

pub fn write_metrics_csv(path: impl AsRef<Path>, history: &[IterationRecord]) -> Result<(), LoopError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LoopError::RunDir(e.to_string()))?;
    for r in history {
        w.serialize(MetricsRow::from(r))
            .map_err(|e| LoopError::RunDir(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, LoopError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| LoopError::RunDir(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| LoopError::RunDir(format!("{}: {e}", path.display())))
}
