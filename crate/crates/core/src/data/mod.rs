//! Annotation data model, COCO-compatible persistence and dataset partitioning.

mod coco;
mod partition;

pub use coco::{load_coco, load_coco_with, parse_coco, save_coco, to_coco_string, LoadOptions};
pub use partition::{make_partitions, PartitionSpec};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BBox, RleMask};

pub type ImageId = u64;
pub type CategoryId = u64;
pub type AnnotationId = u64;

/// Default cap on `width * height` for a single image.
pub const DEFAULT_MAX_PIXELS: u64 = 1 << 26;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed dataset file: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: CategoryId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    /// Path of the image file relative to the dataset's image root.
    pub file_path: String,
}

/// Where an annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    /// Promoted from detector output during the given loop iteration.
    Inferred(u32),
}

impl Source {
    pub fn is_human(self) -> bool {
        matches!(self, Source::Human)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub mask: RleMask,
    pub area: u64,
    pub bbox: BBox,
    pub source: Source,
    pub confidence: f64,
}

impl Annotation {
    /// Builds an annotation with `area` and `bbox` derived from the mask.
    pub fn new(
        id: AnnotationId,
        image_id: ImageId,
        category_id: CategoryId,
        mask: RleMask,
        source: Source,
        confidence: f64,
    ) -> Self {
        let area = mask.area();
        let bbox = mask.bbox().unwrap_or(BBox { x: 0, y: 0, w: 0, h: 0 });
        Self {
            id,
            image_id,
            category_id,
            mask,
            area,
            bbox,
            source,
            confidence,
        }
    }

    pub fn human(id: AnnotationId, image_id: ImageId, category_id: CategoryId, mask: RleMask) -> Self {
        Self::new(id, image_id, category_id, mask, Source::Human, 1.0)
    }

    /// Views this annotation as a detection, e.g. for scoring a ground-truth
    /// file against itself.
    pub fn as_detection(&self) -> Detection {
        Detection {
            image_id: self.image_id,
            category_id: self.category_id,
            mask: self.mask.clone(),
            confidence: self.confidence,
        }
    }
}

/// One predicted instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub mask: RleMask,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Bootstrapping,
    Training,
    Testing,
}

/// Partition membership. Bootstrapping images may also be training images;
/// testing images belong to no other partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partitions {
    pub bootstrapping: BTreeSet<ImageId>,
    pub training: BTreeSet<ImageId>,
    pub testing: BTreeSet<ImageId>,
}

impl Partitions {
    pub fn get(&self, partition: Partition) -> &BTreeSet<ImageId> {
        match partition {
            Partition::Bootstrapping => &self.bootstrapping,
            Partition::Training => &self.training,
            Partition::Testing => &self.testing,
        }
    }

    pub fn contains(&self, partition: Partition, image: ImageId) -> bool {
        self.get(partition).contains(&image)
    }

    /// All partitions the image belongs to, in declaration order.
    pub fn partitions_of(&self, image: ImageId) -> Vec<Partition> {
        [Partition::Bootstrapping, Partition::Training, Partition::Testing]
            .into_iter()
            .filter(|&p| self.contains(p, image))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotatedDataset {
    pub categories: Vec<CategoryDef>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub partitions: Partitions,
}

impl AnnotatedDataset {
    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn images_in(&self, partition: Partition) -> Vec<&ImageRecord> {
        let ids = self.partitions.get(partition);
        self.images.iter().filter(|im| ids.contains(&im.id)).collect()
    }

    pub fn annotations_of(&self, image: ImageId) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.image_id == image)
    }

    /// Annotations grouped by image id, in annotation order.
    pub fn annotations_by_image(&self) -> BTreeMap<ImageId, Vec<&Annotation>> {
        let mut out: BTreeMap<ImageId, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }

    pub fn next_annotation_id(&self) -> AnnotationId {
        self.annotations.iter().map(|a| a.id).max().unwrap_or(0) + 1
    }

    /// Sorts images, categories and annotations by id.
    pub fn sort(&mut self) {
        self.categories.sort_by_key(|c| c.id);
        self.images.sort_by_key(|i| i.id);
        self.annotations.sort_by_key(|a| a.id);
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self, max_pixels: u64) -> Result<(), DataError> {
        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if c.id == 0 {
                return Err(DataError::Schema("category id must be positive".into()));
            }
            if c.name.is_empty() {
                return Err(DataError::Schema(format!("category {} has an empty name", c.id)));
            }
            if !cat_ids.insert(c.id) {
                return Err(DataError::Schema(format!("duplicate category id {}", c.id)));
            }
        }

        let mut images: HashMap<ImageId, &ImageRecord> = HashMap::new();
        for im in &self.images {
            if im.id == 0 {
                return Err(DataError::Schema("image id must be positive".into()));
            }
            if im.width == 0 || im.height == 0 {
                return Err(DataError::Geometry(format!("image {} has zero size", im.id)));
            }
            if im.width as u64 * im.height as u64 > max_pixels {
                return Err(DataError::Geometry(format!(
                    "image {} exceeds the {max_pixels}-pixel cap",
                    im.id
                )));
            }
            if images.insert(im.id, im).is_some() {
                return Err(DataError::Schema(format!("duplicate image id {}", im.id)));
            }
        }

        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if a.id == 0 {
                return Err(DataError::Schema("annotation id must be positive".into()));
            }
            if !ann_ids.insert(a.id) {
                return Err(DataError::Schema(format!("duplicate annotation id {}", a.id)));
            }
            let im = images.get(&a.image_id).ok_or_else(|| {
                DataError::Schema(format!("annotation {} references unknown image {}", a.id, a.image_id))
            })?;
            if !cat_ids.contains(&a.category_id) {
                return Err(DataError::Schema(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                )));
            }
            if a.mask.height() != im.height || a.mask.width() != im.width {
                return Err(DataError::Geometry(format!(
                    "annotation {} mask is {}x{} but image {} is {}x{}",
                    a.id,
                    a.mask.height(),
                    a.mask.width(),
                    im.id,
                    im.height,
                    im.width
                )));
            }
            let bbox = a.mask.bbox().unwrap_or(BBox { x: 0, y: 0, w: 0, h: 0 });
            if a.area != a.mask.area() || a.bbox != bbox {
                return Err(DataError::Geometry(format!(
                    "annotation {} area/bbox disagree with its mask",
                    a.id
                )));
            }
            if !(0.0..=1.0).contains(&a.confidence) {
                return Err(DataError::Schema(format!(
                    "annotation {} confidence {} outside [0, 1]",
                    a.id, a.confidence
                )));
            }
        }

        for p in [Partition::Bootstrapping, Partition::Training, Partition::Testing] {
            for id in self.partitions.get(p) {
                if !images.contains_key(id) {
                    return Err(DataError::Partition(format!("{p:?} lists unknown image {id}")));
                }
            }
        }
        if let Some(id) = self
            .partitions
            .testing
            .iter()
            .find(|id| self.partitions.training.contains(id) || self.partitions.bootstrapping.contains(id))
        {
            return Err(DataError::Partition(format!(
                "image {id} is in the testing partition and another partition"
            )));
        }
        Ok(())
    }
}
