//! Built-in statistical reference detector.
//!
//! Every category, plus the background, is modelled as a diagonal Gaussian
//! over a five-dimensional pixel feature. Training folds the pixels of
//! augmented annotated images into the running statistics; segmentation
//! scores each pixel against the background, thresholds, and splits the
//! foreground into connected components.

mod augment;
mod features;
mod model;

pub use augment::{add_noise, AugmentSet, Transform};
pub use features::{extract_features, FeatureGrid, PixelFeature, Raster, FEATURE_DIM};
pub use model::{BatchStats, ClassModel, VARIANCE_FLOOR};

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::CategoryId;
use crate::mask::BinaryMask;
use crate::seeds::mix_seed;

/// Blob layout version written by [`RefDetector::to_bytes`].
pub const STATE_VERSION: u8 = 1;
/// Model id reserved for the background in the state blob.
pub const BACKGROUND_ID: u64 = 0;

#[derive(Debug, Error, PartialEq)]
pub enum RefDetectError {
    #[error("training job has no usable images")]
    EmptyJob,
    #[error("detector has not been trained")]
    NotTrained,
    #[error("unsupported state version {0}")]
    Version(u8),
    #[error("corrupt detector state: {0}")]
    Serialization(String),
    #[error("invalid parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefDetectorParams {
    /// A pixel is foreground when its best category score exceeds this.
    pub pixel_threshold: f64,
    pub min_area: u64,
    /// 4 or 8.
    pub connectivity: u8,
    pub augment: AugmentSet,
    /// Divides the log-likelihood ratio before the logistic, softening the
    /// overconfidence of independent per-feature Gaussians; 1 is untempered,
    /// the default averages the ratio over the feature dimensions.
    pub temperature: f64,
}

impl Default for RefDetectorParams {
    fn default() -> Self {
        Self {
            pixel_threshold: 0.5,
            min_area: 30,
            connectivity: 8,
            augment: AugmentSet::default(),
            temperature: FEATURE_DIM as f64,
        }
    }
}

impl RefDetectorParams {
    pub fn validate(&self) -> Result<(), RefDetectError> {
        if !(self.pixel_threshold > 0.0 && self.pixel_threshold < 1.0) {
            return Err(RefDetectError::Params(format!(
                "pixel threshold {} outside (0, 1)",
                self.pixel_threshold
            )));
        }
        if self.min_area < 1 {
            return Err(RefDetectError::Params("min area must be at least 1".into()));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(RefDetectError::Params(format!("connectivity {}", self.connectivity)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RefDetectError::Params(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.augment.noise_sigma >= 0.0 && self.augment.noise_sigma.is_finite()) {
            return Err(RefDetectError::Params("noise sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// An annotated image as seen by the trainer.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub raster: Arc<Raster>,
    pub masks: Vec<(CategoryId, BinaryMask)>,
}

/// Presentation schedule for one training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: u32,
    pub batch_size: u32,
    pub steps_per_epoch: u32,
    pub seed: u64,
    pub augment: bool,
}

impl Schedule {
    pub fn batches(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch as u64
    }

    pub fn presentations(&self) -> u64 {
        self.batches() * self.batch_size as u64
    }
}

/// One connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub category_id: CategoryId,
    pub mask: BinaryMask,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefDetector {
    params: RefDetectorParams,
    background: ClassModel,
    categories: BTreeMap<CategoryId, ClassModel>,
    trained_steps: u64,
    presentations: u64,
}

impl RefDetector {
    pub fn new(params: RefDetectorParams) -> Result<Self, RefDetectError> {
        params.validate()?;
        Ok(Self {
            params,
            background: ClassModel::default(),
            categories: BTreeMap::new(),
            trained_steps: 0,
            presentations: 0,
        })
    }

    pub fn params(&self) -> &RefDetectorParams {
        &self.params
    }

    pub fn set_params(&mut self, params: RefDetectorParams) -> Result<(), RefDetectError> {
        params.validate()?;
        self.params = params;
        Ok(())
    }

    pub fn background(&self) -> &ClassModel {
        &self.background
    }

    pub fn categories(&self) -> &BTreeMap<CategoryId, ClassModel> {
        &self.categories
    }

    /// Batches consumed so far.
    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    /// Images presented so far (batches times batch size).
    pub fn presentations(&self) -> u64 {
        self.presentations
    }

    /// Runs `schedule.presentations()` augmented presentations, sampling
    /// images with replacement from `pool`.
    ///
    /// Presentation draws come from one seeded stream; the per-presentation
    /// statistics are computed in parallel and merged in draw order, so the
    /// result does not depend on thread scheduling.
    pub fn fit(&mut self, pool: &[TrainingImage], schedule: &Schedule) -> Result<(), RefDetectError> {
        if pool.is_empty() || schedule.epochs == 0 || schedule.batch_size == 0 || schedule.steps_per_epoch == 0 {
            return Err(RefDetectError::EmptyJob);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(schedule.seed, self.trained_steps));
        let draws: Vec<(usize, Transform, u64)> = (0..schedule.presentations())
            .map(|_| {
                let idx = rng.random_range(0..pool.len());
                let transform = if schedule.augment {
                    self.params.augment.draw(&mut rng)
                } else {
                    Transform::default()
                };
                (idx, transform, rng.random::<u64>())
            })
            .collect();

        let noise = if schedule.augment {
            self.params.augment.noise_sigma
        } else {
            0.0
        };
        let stats: Vec<(BatchStats, BTreeMap<CategoryId, BatchStats>)> = draws
            .par_iter()
            .map(|&(idx, transform, noise_seed)| present(&pool[idx], transform, noise, noise_seed))
            .collect();
        for (bg, cats) in &stats {
            self.background.merge(bg);
            for (cat, s) in cats {
                self.categories.entry(*cat).or_default().merge(s);
            }
        }
        self.trained_steps += schedule.batches();
        self.presentations += schedule.presentations();
        Ok(())
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0 && self.categories.values().any(ClassModel::is_trained)
    }

    /// Segments an image into scored connected components.
    ///
    /// Masks from one call are pairwise disjoint.
    pub fn segment(&self, raster: &Raster) -> Result<Vec<Segment>, RefDetectError> {
        if !self.is_trained() {
            return Err(RefDetectError::NotTrained);
        }
        let cats: Vec<(CategoryId, &ClassModel)> = self
            .categories
            .iter()
            .filter(|(_, m)| m.is_trained())
            .map(|(&id, m)| (id, m))
            .collect();
        let grid = extract_features(raster);
        let n_px = grid.features.len();
        let k = cats.len();

        // Without background observations the background density is taken
        // as uniform over the unit feature cube.
        let bg_trained = self.background.is_trained();
        let temperature = self.params.temperature;
        let mut scores = vec![0.0f64; n_px * k];
        let mut labels: Vec<Option<usize>> = vec![None; n_px];
        scores
            .par_chunks_mut(k)
            .zip(labels.par_iter_mut())
            .zip(grid.features.par_iter())
            .for_each(|((row, label), f)| {
                let lbg = if bg_trained {
                    self.background.log_likelihood(f)
                } else {
                    0.0
                };
                let mut best: Option<(usize, f64)> = None;
                for (j, (_, model)) in cats.iter().enumerate() {
                    let s = 1.0 / (1.0 + ((lbg - model.log_likelihood(f)) / temperature).exp());
                    row[j] = s;
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
                if let Some((j, s)) = best {
                    if s > self.params.pixel_threshold {
                        *label = Some(j);
                    }
                }
            });

        let (w, h) = (grid.width as usize, grid.height as usize);
        let mut visited = vec![false; n_px];
        let mut segments = Vec::new();
        let mut queue = VecDeque::new();
        let mut pixels = Vec::new();
        for start in 0..n_px {
            if visited[start] || labels[start].is_none() {
                continue;
            }
            visited[start] = true;
            queue.push_back(start);
            pixels.clear();
            while let Some(p) = queue.pop_front() {
                pixels.push(p);
                let (r, c) = ((p / w) as isize, (p % w) as isize);
                for (dr, dc) in neighbours(self.params.connectivity) {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if !visited[q] && labels[q].is_some() {
                        visited[q] = true;
                        queue.push_back(q);
                    }
                }
            }
            if (pixels.len() as u64) < self.params.min_area {
                continue;
            }
            let mut votes = vec![0usize; k];
            for &p in &pixels {
                votes[labels[p].expect("foreground")] += 1;
            }
            // Majority label; ties go to the lowest category id.
            let j = (0..k).fold(0, |best, j| if votes[j] > votes[best] { j } else { best });
            let confidence = pixels.iter().map(|&p| scores[p * k + j]).sum::<f64>() / pixels.len() as f64;
            let mut mask = BinaryMask::new(grid.height, grid.width);
            for &p in &pixels {
                mask.set((p / w) as u32, (p % w) as u32, true);
            }
            segments.push(Segment {
                category_id: cats[j].0,
                mask,
                confidence: confidence.clamp(0.0, 1.0),
            });
        }
        Ok(segments)
    }

    /// Serializes the full state: version byte, model count, then
    /// `(id, n, mean[5], var[5])` per model (background first, id 0), then
    /// parameters (pixel threshold, min area, connectivity, augmentation
    /// flags, noise sigma, temperature) and step counters; all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![STATE_VERSION];
        let models: Vec<(u64, &ClassModel)> = std::iter::once((BACKGROUND_ID, &self.background))
            .chain(self.categories.iter().map(|(&id, m)| (id, m)))
            .collect();
        out.extend((models.len() as u64).to_le_bytes());
        for (id, m) in models {
            out.extend(id.to_le_bytes());
            out.extend(m.count.to_le_bytes());
            for v in m.mean.iter().chain(&m.var) {
                out.extend(v.to_le_bytes());
            }
        }
        out.extend(self.params.pixel_threshold.to_le_bytes());
        out.extend(self.params.min_area.to_le_bytes());
        out.push(self.params.connectivity);
        out.push(self.params.augment.flags());
        out.extend(self.params.augment.noise_sigma.to_le_bytes());
        out.extend(self.params.temperature.to_le_bytes());
        out.extend(self.trained_steps.to_le_bytes());
        out.extend(self.presentations.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RefDetectError> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.u8()?;
        if version != STATE_VERSION {
            return Err(RefDetectError::Version(version));
        }
        let n_models = r.u64()?;
        if n_models == 0 || n_models > 1 << 20 {
            return Err(RefDetectError::Serialization(format!("{n_models} models")));
        }
        let mut background = None;
        let mut categories = BTreeMap::new();
        for _ in 0..n_models {
            let id = r.u64()?;
            let count = r.u64()?;
            let mut mean = [0.0; FEATURE_DIM];
            let mut var = [0.0; FEATURE_DIM];
            for v in mean.iter_mut().chain(var.iter_mut()) {
                *v = r.f64()?;
            }
            let model = ClassModel { count, mean, var };
            if id == BACKGROUND_ID {
                if background.replace(model).is_some() {
                    return Err(RefDetectError::Serialization("two background models".into()));
                }
            } else if categories.insert(id, model).is_some() {
                return Err(RefDetectError::Serialization(format!("duplicate model {id}")));
            }
        }
        let pixel_threshold = r.f64()?;
        let min_area = r.u64()?;
        let connectivity = r.u8()?;
        let flags = r.u8()?;
        let noise_sigma = r.f64()?;
        let temperature = r.f64()?;
        let trained_steps = r.u64()?;
        let presentations = r.u64()?;
        if r.pos != bytes.len() {
            return Err(RefDetectError::Serialization("trailing bytes".into()));
        }
        let params = RefDetectorParams {
            pixel_threshold,
            min_area,
            connectivity,
            augment: AugmentSet::from_flags(flags, noise_sigma),
            temperature,
        };
        params
            .validate()
            .map_err(|e| RefDetectError::Serialization(e.to_string()))?;
        Ok(Self {
            params,
            background: background.ok_or_else(|| RefDetectError::Serialization("no background model".into()))?,
            categories,
            trained_steps,
            presentations,
        })
    }
}

fn neighbours(connectivity: u8) -> &'static [(isize, isize)] {
    const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
    const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    if connectivity == 4 {
        &FOUR
    } else {
        &EIGHT
    }
}

/// Statistics contributed by one augmented presentation.
fn present(
    image: &TrainingImage,
    transform: Transform,
    noise_sigma: f64,
    noise_seed: u64,
) -> (BatchStats, BTreeMap<CategoryId, BatchStats>) {
    let mut raster = transform.apply_raster(&image.raster);
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        add_noise(&mut raster, noise_sigma, &mut rng);
    }
    let grid = extract_features(&raster);
    let n_px = grid.features.len();

    let mut per_cat: BTreeMap<CategoryId, Vec<bool>> = BTreeMap::new();
    let mut covered = vec![false; n_px];
    for (cat, mask) in &image.masks {
        let mask = transform.apply_mask(mask);
        let union = per_cat.entry(*cat).or_insert_with(|| vec![false; n_px]);
        for (i, &b) in mask.bits().iter().enumerate() {
            if b {
                union[i] = true;
                covered[i] = true;
            }
        }
    }
    let bg = stats_where(&grid, &covered, false);
    let cats = per_cat
        .iter()
        .map(|(&cat, sel)| (cat, stats_where(&grid, sel, true)))
        .collect();
    (bg, cats)
}

fn stats_where(grid: &FeatureGrid, selection: &[bool], want: bool) -> BatchStats {
    BatchStats::from_features(
        grid.features
            .iter()
            .zip(selection)
            .filter(move |(_, &b)| b == want)
            .map(|(f, _)| f),
    )
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], RefDetectError> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| RefDetectError::Serialization("truncated state".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, RefDetectError> {
        Ok(self.take::<1>()?[0])
    }

    fn u64(&mut self) -> Result<u64, RefDetectError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, RefDetectError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}
