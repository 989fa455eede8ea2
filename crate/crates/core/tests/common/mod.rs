#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use bootseg::data::{Annotation, ImageRecord};
use bootseg::detector::{ImageStore, TrainJob};
use bootseg::mask::rle_encode;
use bootseg::synth::{generate_scene, OverlapMode, Scene, SceneSpec};

/// Seeded synthetic scenes registered in an image store, in memory or
/// written as PNG under `dir`.
pub struct Fixture {
    pub store: Arc<ImageStore>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Vec<Annotation>>,
    pub scenes: Vec<Scene>,
}

impl Fixture {
    pub fn job(&self, epochs: u32, seed: u64) -> TrainJob {
        TrainJob {
            images: self
                .images
                .iter()
                .cloned()
                .zip(self.annotations.iter().cloned())
                .collect(),
            epochs,
            batch_size: 2,
            steps_per_epoch: 24,
            seed,
            augment: true,
        }
    }
}

pub fn scene_spec(overlap: OverlapMode, count: u32, seed: u64) -> SceneSpec {
    SceneSpec::coffee(overlap, count, seed)
}

pub fn fixture(n: usize, overlap: OverlapMode, count: u32, seed: u64, dir: Option<&Path>) -> Fixture {
    let store = Arc::new(ImageStore::new(dir.map(Path::to_path_buf).unwrap_or_default()));
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut scenes = Vec::new();
    let mut next_ann = 1;
    for i in 0..n {
        let spec = scene_spec(overlap, count, seed.wrapping_mul(1000) + i as u64);
        let scene = generate_scene(&spec).expect("scene");
        let id = i as u64 + 1;
        let file_path = format!("img_{id:03}.png");
        match dir {
            Some(d) => scene.raster.to_rgb8().save(d.join(&file_path)).expect("write png"),
            None => store.insert(file_path.clone(), scene.raster.clone()),
        }
        images.push(ImageRecord {
            id,
            width: spec.width,
            height: spec.height,
            file_path,
        });
        let anns = scene
            .instances
            .iter()
            .map(|inst| {
                let a = Annotation::human(next_ann, id, inst.category_id, rle_encode(&inst.mask));
                next_ann += 1;
                a
            })
            .collect();
        annotations.push(anns);
        scenes.push(scene);
    }
    Fixture {
        store,
        images,
        annotations,
        scenes,
    }
}
