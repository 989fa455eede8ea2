use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    coffee_background, coffee_category, generate_scene, Appearance, CategorySpec, OverlapMode, Scene, SceneSpec,
    SynthError,
};
use crate::data::{save_coco, AnnotatedDataset, Annotation, ImageRecord, Partitions};
use crate::mask::rle_encode;
use crate::seeds::mix_seed;

pub const DATASET_FILE: &str = "dataset.json";
pub const IMAGE_DIR: &str = "images";

/// A complete synthetic experiment: bootstrapping, training and testing
/// scenes sharing one appearance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub width: u32,
    pub height: u32,
    /// `count` is the number of instances per scene.
    pub categories: Vec<CategorySpec>,
    pub background: Appearance,
    pub noise_sigma: f64,
    pub distractor_count: u32,
    pub distractor_hue_delta: f64,
    #[serde(default)]
    pub distractor_blend: f64,
    pub min_visible_area: u64,
    /// One scene per entry.
    pub bootstrap_modes: Vec<OverlapMode>,
    /// Human annotations kept over all bootstrapping scenes.
    pub bootstrap_annotations: u32,
    pub training_images: u32,
    /// Cycled over the training scenes.
    pub training_modes: Vec<OverlapMode>,
    /// One fully annotated scene per entry.
    pub testing_modes: Vec<OverlapMode>,
    pub seed: u64,
}

impl ExperimentSpec {
    /// Coffee-grain analogue: one unconnected and one connected bootstrap
    /// scene, unlabelled training scenes of all regimes, and one test scene
    /// per regime.
    pub fn coffee(bootstrap_annotations: u32, training_images: u32, seed: u64) -> Self {
        Self {
            width: 128,
            height: 128,
            categories: vec![coffee_category()],
            background: coffee_background(),
            noise_sigma: 0.01,
            distractor_count: 0,
            distractor_hue_delta: 120.0,
            distractor_blend: 0.0,
            min_visible_area: 30,
            bootstrap_modes: vec![OverlapMode::Unconnected, OverlapMode::HeavilyConnected],
            bootstrap_annotations,
            training_images,
            training_modes: OverlapMode::ALL.to_vec(),
            testing_modes: OverlapMode::ALL.to_vec(),
            seed,
        }
    }

    /// Coffee scenes with four near-target distractors each: a small hue
    /// shift blended halfway toward the background. Fewer grains leave room
    /// for the distractors in unconnected scenes.
    pub fn coffee_distractors(bootstrap_annotations: u32, training_images: u32, seed: u64) -> Self {
        let mut spec = Self::coffee(bootstrap_annotations, training_images, seed);
        spec.categories[0].count = 26;
        spec.distractor_count = 4;
        spec.distractor_hue_delta = 20.0;
        spec.distractor_blend = 0.5;
        spec
    }

    /// Three visually distinct classes, a few instances each, two off-hue
    /// non-target objects per scene and four fully annotated test scenes.
    pub fn fruits(bootstrap_annotations: u32, training_images: u32, seed: u64) -> Self {
        let class = |id, name: &str, color: [f64; 3], radius| CategorySpec {
            id,
            name: name.into(),
            count: 3,
            appearance: Appearance {
                color,
                color_jitter: 0.04,
                texture_sigma: 0.03,
            },
            radius,
        };
        Self {
            width: 128,
            height: 128,
            categories: vec![
                class(1, "apple", [0.75, 0.15, 0.12], (9.0, 12.0)),
                class(2, "lemon", [0.90, 0.80, 0.20], (8.0, 11.0)),
                class(3, "lime", [0.30, 0.65, 0.20], (7.0, 9.0)),
            ],
            background: Appearance {
                color: [0.35, 0.30, 0.40],
                color_jitter: 0.0,
                texture_sigma: 0.02,
            },
            noise_sigma: 0.01,
            distractor_count: 2,
            distractor_hue_delta: 120.0,
            distractor_blend: 0.0,
            min_visible_area: 30,
            bootstrap_modes: vec![OverlapMode::Unconnected],
            bootstrap_annotations,
            training_images,
            training_modes: vec![OverlapMode::Unconnected, OverlapMode::LooselyOverlapping],
            testing_modes: vec![OverlapMode::LooselyOverlapping; 4],
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.bootstrap_annotations == 0 {
            return Err(SynthError::Spec("at least one bootstrap annotation is required".into()));
        }
        if self.bootstrap_modes.is_empty() {
            return Err(SynthError::Spec("at least one bootstrap scene is required".into()));
        }
        if self.training_images > 0 && self.training_modes.is_empty() {
            return Err(SynthError::Spec(
                "training scenes need at least one overlap mode".into(),
            ));
        }
        Ok(())
    }

    /// Scene spec of the `index`-th scene overall.
    pub fn scene(&self, overlap: OverlapMode, index: u64) -> SceneSpec {
        SceneSpec {
            width: self.width,
            height: self.height,
            categories: self.categories.clone(),
            overlap,
            distractor_count: self.distractor_count,
            distractor_hue_delta: self.distractor_hue_delta,
            distractor_blend: self.distractor_blend,
            background: self.background,
            noise_sigma: self.noise_sigma,
            min_visible_area: self.min_visible_area,
            seed: mix_seed(self.seed, index),
        }
    }

    fn layout(&self) -> Vec<(Role, OverlapMode)> {
        let boot = self.bootstrap_modes.iter().map(|&m| (Role::Bootstrap, m));
        let train = (0..self.training_images as usize)
            .map(|i| (Role::Training, self.training_modes[i % self.training_modes.len()]));
        let test = self.testing_modes.iter().map(|&m| (Role::Testing, m));
        boot.chain(train).chain(test).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Bootstrap,
    Training,
    Testing,
}

/// Generates all scenes, writes them as PNG under `out_dir/images`, saves
/// the dataset to `out_dir/dataset.json` and returns it.
///
/// Image ids are assigned in the order bootstrapping, training, testing.
/// Bootstrapping images are also training images. Bootstrap annotations are
/// picked round-robin over the bootstrap scenes from seeded shuffles, so
/// every bootstrap scene gets one before any gets two.
pub fn generate_experiment(spec: &ExperimentSpec, out_dir: impl AsRef<Path>) -> Result<AnnotatedDataset, SynthError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join(IMAGE_DIR))?;
    let layout = spec.layout();
    let scenes: Vec<Scene> = layout
        .par_iter()
        .enumerate()
        .map(|(i, &(_, mode))| generate_scene(&spec.scene(mode, i as u64)))
        .collect::<Result<_, _>>()?;

    let boot_ids: Vec<usize> = (0..layout.len()).filter(|&i| layout[i].0 == Role::Bootstrap).collect();
    let available: usize = boot_ids.iter().map(|&i| scenes[i].instances.len()).sum();
    if (spec.bootstrap_annotations as usize) > available {
        return Err(SynthError::Spec(format!(
            "{} bootstrap annotations requested but the bootstrap scenes hold {available} instances",
            spec.bootstrap_annotations
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX));
    let mut queues: Vec<Vec<usize>> = boot_ids
        .iter()
        .map(|&i| {
            let mut idx: Vec<usize> = (0..scenes[i].instances.len()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let mut chosen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); boot_ids.len()];
    let mut remaining = spec.bootstrap_annotations as usize;
    while remaining > 0 {
        for (q, c) in queues.iter_mut().zip(chosen.iter_mut()) {
            if remaining == 0 {
                break;
            }
            if let Some(i) = q.pop() {
                c.insert(i);
                remaining -= 1;
            }
        }
    }

    let mut dataset = AnnotatedDataset {
        categories: spec.categories.iter().map(CategorySpec::def).collect(),
        ..Default::default()
    };
    let mut partitions = Partitions::default();
    let mut next_ann = 1;
    for (i, ((role, _), scene)) in layout.iter().zip(&scenes).enumerate() {
        let image_id = i as u64 + 1;
        let file_path = format!("{IMAGE_DIR}/{image_id:04}.png");
        let path = out_dir.join(&file_path);
        scene.raster.to_rgb8().save(&path).map_err(|e| SynthError::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        dataset.images.push(ImageRecord {
            id: image_id,
            width: spec.width,
            height: spec.height,
            file_path,
        });
        let keep: Box<dyn Fn(usize) -> bool> = match role {
            Role::Bootstrap => {
                let slot = boot_ids.iter().position(|&b| b == i).expect("bootstrap scene");
                let set = chosen[slot].clone();
                partitions.bootstrapping.insert(image_id);
                partitions.training.insert(image_id);
                Box::new(move |k| set.contains(&k))
            }
            Role::Training => {
                partitions.training.insert(image_id);
                Box::new(|_| false)
            }
            Role::Testing => {
                partitions.testing.insert(image_id);
                Box::new(|_| true)
            }
        };
        for (k, inst) in scene.instances.iter().enumerate() {
            if keep(k) {
                dataset.annotations.push(Annotation::human(
                    next_ann,
                    image_id,
                    inst.category_id,
                    rle_encode(&inst.mask),
                ));
                next_ann += 1;
            }
        }
    }
    dataset.partitions = partitions;
    save_coco(&dataset, out_dir.join(DATASET_FILE))?;
    Ok(dataset)
}
