use rayon::prelude::*;

use super::{Detector, DetectorError, ImageStore, TrainJob};
use crate::data::{Detection, ImageRecord};
use crate::mask::{rle_decode, rle_encode};
use crate::refdetect::{RefDetector, RefDetectorParams, Schedule, TrainingImage};

/// In-process adapter around [`RefDetector`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinDetector {
    model: RefDetector,
}

impl BuiltinDetector {
    pub fn new(params: RefDetectorParams) -> Result<Self, DetectorError> {
        Ok(Self {
            model: RefDetector::new(params)?,
        })
    }

    pub fn from_state(bytes: &[u8]) -> Result<Self, DetectorError> {
        Ok(Self {
            model: RefDetector::from_bytes(bytes)?,
        })
    }

    pub fn model(&self) -> &RefDetector {
        &self.model
    }

    /// Loads rasters and decodes masks for a job.
    pub fn training_pool(job: &TrainJob, store: &ImageStore) -> Result<Vec<TrainingImage>, DetectorError> {
        job.images
            .iter()
            .map(|(image, anns)| {
                let raster = store.load(image)?;
                let masks = anns
                    .iter()
                    .map(|a| {
                        rle_decode(&a.mask)
                            .map(|m| (a.category_id, m))
                            .map_err(|e| DetectorError::EmptyJob(format!("annotation {}: {e}", a.id)))
                    })
                    .collect::<Result<_, _>>()?;
                Ok(TrainingImage { raster, masks })
            })
            .collect()
    }

    pub fn infer_one(&self, image: &ImageRecord, store: &ImageStore) -> Result<Vec<Detection>, DetectorError> {
        let raster = store.load(image)?;
        Ok(self
            .model
            .segment(&raster)?
            .into_iter()
            .map(|s| Detection {
                image_id: image.id,
                category_id: s.category_id,
                mask: rle_encode(&s.mask),
                confidence: s.confidence,
            })
            .collect())
    }
}

impl Detector for BuiltinDetector {
    fn train(&mut self, job: &TrainJob, store: &ImageStore) -> Result<(), DetectorError> {
        let pool = Self::training_pool(job, store)?;
        let schedule = Schedule {
            epochs: job.epochs,
            batch_size: job.batch_size,
            steps_per_epoch: job.steps_per_epoch,
            seed: job.seed,
            augment: job.augment,
        };
        self.model.fit(&pool, &schedule)?;
        Ok(())
    }

    fn infer(&self, images: &[ImageRecord], store: &ImageStore) -> Result<Vec<Detection>, DetectorError> {
        let per_image: Vec<Vec<Detection>> = images
            .par_iter()
            .map(|image| self.infer_one(image, store))
            .collect::<Result<_, _>>()?;
        Ok(per_image.into_iter().flatten().collect())
    }

    fn save_state(&self) -> Result<Vec<u8>, DetectorError> {
        Ok(self.model.to_bytes())
    }

    fn trained_steps(&self) -> u64 {
        self.model.trained_steps()
    }

    fn presentations(&self) -> u64 {
        self.model.presentations()
    }
}
