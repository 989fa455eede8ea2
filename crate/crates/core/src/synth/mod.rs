//! Seeded synthetic particle scenes with exact ground truth.
//!
//! A scene is a textured background with irregular blobs drawn in z-order.
//! A later blob occludes earlier ones and leaves a one-pixel background seam
//! around itself, so the visible regions of different instances never
//! share an edge or a corner. Distractors are painted like targets but with
//! a hue-shifted colour and never appear in the ground truth.

mod blob;
mod experiment;

pub use blob::{dilate, within, Blob, HARMONICS, MAX_DEFORMATION};
pub use experiment::{generate_experiment, ExperimentSpec, DATASET_FILE, IMAGE_DIR};

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CategoryDef, CategoryId, DataError};
use crate::mask::BinaryMask;
use crate::refdetect::Raster;
use crate::seeds::mix_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot pack the requested instances: {0}")]
    Packing(String),
    #[error("invalid scene specification: {0}")]
    Spec(String),
    #[error("cannot write image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// No two instances within two pixels of each other.
    Unconnected,
    /// At least one touching pair; full-shape pairwise IoU at most 0.3.
    LooselyOverlapping,
    /// At least half the instances touch a neighbour.
    HeavilyConnected,
}

impl OverlapMode {
    pub const ALL: [OverlapMode; 3] = [
        OverlapMode::Unconnected,
        OverlapMode::LooselyOverlapping,
        OverlapMode::HeavilyConnected,
    ];
}

/// Colour model of a class of objects or of the background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    /// Mean RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Per-instance standard deviation of the colour, per channel.
    pub color_jitter: f64,
    /// Per-pixel standard deviation of the texture, per channel.
    pub texture_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: CategoryId,
    pub name: String,
    /// Instances per scene.
    pub count: u32,
    pub appearance: Appearance,
    /// Range of the major semi-axis in pixels.
    pub radius: (f64, f64),
}

impl CategorySpec {
    pub fn def(&self) -> CategoryDef {
        CategoryDef {
            id: self.id,
            name: self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub categories: Vec<CategorySpec>,
    pub overlap: OverlapMode,
    pub distractor_count: u32,
    /// Hue rotation of distractors relative to the first category, degrees.
    pub distractor_hue_delta: f64,
    /// Fraction in `[0, 1]` by which distractor colours are mixed toward
    /// the background colour after the hue shift.
    #[serde(default)]
    pub distractor_blend: f64,
    pub background: Appearance,
    /// Additive per-pixel Gaussian noise over the whole image.
    pub noise_sigma: f64,
    /// Instances whose visible area falls below this are left out of the
    /// ground truth.
    pub min_visible_area: u64,
    pub seed: u64,
}

/// A ground-truth instance: its visible region after occlusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub category_id: CategoryId,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub raster: Raster,
    pub instances: Vec<SceneInstance>,
    /// Visible regions of the distractors.
    pub distractors: Vec<BinaryMask>,
}

const PLACEMENT_TRIES: usize = 400;
const SCENE_TRIES: u64 = 25;
/// Chebyshev distance at which two visible regions count as touching.
pub const TOUCH_DISTANCE: u32 = 2;

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::Spec("empty canvas".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !ids.insert(c.id) {
                return Err(SynthError::Spec(format!("duplicate category {}", c.id)));
            }
            if !(c.radius.0 > 0.0 && c.radius.0 <= c.radius.1) {
                return Err(SynthError::Spec(format!("category {}: bad radius range", c.id)));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_blend) {
            return Err(SynthError::Spec(format!(
                "distractor blend {} outside [0, 1]",
                self.distractor_blend
            )));
        }
        if self.distractor_count > 0 && self.categories.is_empty() {
            return Err(SynthError::Spec("distractors need a category to imitate".into()));
        }
        let finite =
            |a: &Appearance| a.color.iter().all(|c| c.is_finite()) && a.color_jitter >= 0.0 && a.texture_sigma >= 0.0;
        if !finite(&self.background)
            || !self.categories.iter().all(|c| finite(&c.appearance))
            || !(self.noise_sigma >= 0.0)
        {
            return Err(SynthError::Spec(
                "colours must be finite and spreads non-negative".into(),
            ));
        }
        Ok(())
    }

    fn n_items(&self) -> usize {
        self.categories.iter().map(|c| c.count as usize).sum::<usize>() + self.distractor_count as usize
    }
}

/// What gets painted: a target of some category, or a distractor.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ItemKind {
    Target(usize),
    Distractor,
}

/// Generates one scene. Deterministic per spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let canvas = spec.width as f64 * spec.height as f64;
    let needed: f64 = spec
        .categories
        .iter()
        .map(|c| c.count as f64 * std::f64::consts::PI * (0.7 * c.radius.0).powi(2))
        .sum::<f64>()
        + spec.distractor_count as f64
            * spec
                .categories
                .first()
                .map_or(0.0, |c| std::f64::consts::PI * (0.7 * c.radius.0).powi(2));
    if needed > canvas {
        return Err(SynthError::Packing(format!(
            "{} objects need at least {needed:.0} px but the canvas has {canvas:.0}",
            spec.n_items()
        )));
    }
    let mut last = String::new();
    for attempt in 0..SCENE_TRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, attempt));
        match try_scene(spec, &mut rng) {
            Ok(scene) => return Ok(scene),
            Err(reason) => last = reason,
        }
    }
    Err(SynthError::Packing(format!(
        "{} objects on {}x{} ({:?}) after {SCENE_TRIES} attempts: {last}",
        spec.n_items(),
        spec.width,
        spec.height,
        spec.overlap
    )))
}

fn try_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scene, String> {
    let (w, h) = (spec.width, spec.height);
    let mut kinds: Vec<ItemKind> = spec
        .categories
        .iter()
        .enumerate()
        .flat_map(|(i, c)| std::iter::repeat_n(ItemKind::Target(i), c.count as usize))
        .chain(std::iter::repeat_n(
            ItemKind::Distractor,
            spec.distractor_count as usize,
        ))
        .collect();
    kinds.shuffle(rng);

    let mut shapes: Vec<BinaryMask> = Vec::with_capacity(kinds.len());
    let mut blobs: Vec<Blob> = Vec::with_capacity(kinds.len());
    for kind in &kinds {
        let radius = match kind {
            ItemKind::Target(i) => spec.categories[*i].radius,
            ItemKind::Distractor => spec.categories[0].radius,
        };
        let (blob, mask) = place(spec, rng, radius, &blobs, &shapes)?;
        blobs.push(blob);
        shapes.push(mask);
    }

    // Z-order carving: each later shape plus a one-pixel ring is removed
    // from every earlier visible region.
    let mut visible = shapes.clone();
    for j in 1..shapes.len() {
        let ring = dilate(&shapes[j], 1);
        for v in visible.iter_mut().take(j) {
            for (bit, &r) in v.bits_mut().iter_mut().zip(ring.bits()) {
                *bit &= !r;
            }
        }
    }

    let mut instances = Vec::new();
    let mut distractors = Vec::new();
    for (kind, mask) in kinds.iter().zip(&visible) {
        match kind {
            ItemKind::Target(i) if mask.area() >= spec.min_visible_area => instances.push(SceneInstance {
                category_id: spec.categories[*i].id,
                mask: mask.clone(),
            }),
            ItemKind::Target(_) => {}
            ItemKind::Distractor => distractors.push(mask.clone()),
        }
    }
    match spec.overlap {
        OverlapMode::Unconnected => {}
        OverlapMode::LooselyOverlapping => {
            let all: Vec<&BinaryMask> = visible.iter().filter(|m| !m.is_empty()).collect();
            let touching = (0..all.len()).any(|i| (i + 1..all.len()).any(|j| within(all[i], all[j], TOUCH_DISTANCE)));
            if all.len() >= 2 && !touching {
                return Err("no touching pair".into());
            }
        }
        OverlapMode::HeavilyConnected => {
            let kept: Vec<usize> = (0..kinds.len())
                .filter(|&i| matches!(kinds[i], ItemKind::Target(_)) && visible[i].area() >= spec.min_visible_area)
                .collect();
            let touching = kept
                .iter()
                .filter(|&&i| (0..visible.len()).any(|j| j != i && within(&visible[i], &visible[j], TOUCH_DISTANCE)))
                .count();
            if kept.len() >= 2 && touching * 2 < kept.len() {
                return Err(format!("only {touching} of {} instances touch a neighbour", kept.len()));
            }
        }
    }

    let raster = paint(spec, rng, &kinds, &visible, w, h);
    Ok(Scene {
        raster,
        instances,
        distractors,
    })
}

fn place(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    radius: (f64, f64),
    blobs: &[Blob],
    shapes: &[BinaryMask],
) -> Result<(Blob, BinaryMask), String> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let shape = Blob::random(rng, 0.0, 0.0, radius);
    let e = shape.extent();
    if 2.0 * e >= w || 2.0 * e >= h {
        return Err(format!("a blob of extent {e:.1} does not fit the canvas"));
    }
    for _ in 0..PLACEMENT_TRIES {
        let anchored = match spec.overlap {
            OverlapMode::Unconnected => false,
            OverlapMode::LooselyOverlapping => !blobs.is_empty() && rng.random_bool(0.35),
            OverlapMode::HeavilyConnected => !blobs.is_empty() && rng.random_bool(0.85),
        };
        let (cx, cy) = if anchored {
            let anchor = &blobs[rng.random_range(0..blobs.len())];
            let mean_r = |b: &Blob| 0.5 * (b.rx + b.ry);
            let factor = match spec.overlap {
                OverlapMode::HeavilyConnected => rng.random_range(0.75..1.0),
                _ => rng.random_range(0.9..1.1),
            };
            let d = (mean_r(anchor) + mean_r(&shape)) * factor;
            let t = rng.random_range(0.0..TAU);
            (anchor.cx + d * t.cos(), anchor.cy + d * t.sin())
        } else {
            (rng.random_range(e..w - e), rng.random_range(e..h - e))
        };
        if cx < e || cx > w - e || cy < e || cy > h - e {
            continue;
        }
        let blob = shape.with_centre(cx, cy);
        let mask = blob.rasterize(spec.height, spec.width);
        let ok = match spec.overlap {
            OverlapMode::Unconnected => shapes.iter().all(|s| !within(&mask, s, TOUCH_DISTANCE)),
            OverlapMode::LooselyOverlapping => shapes.iter().all(|s| full_iou(&mask, s) <= 0.3),
            OverlapMode::HeavilyConnected => shapes.iter().all(|s| full_iou(&mask, s) <= 0.3),
        };
        if ok {
            return Ok((blob, mask));
        }
    }
    Err(format!("no free position after {PLACEMENT_TRIES} tries"))
}

fn full_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn paint(spec: &SceneSpec, rng: &mut ChaCha8Rng, kinds: &[ItemKind], visible: &[BinaryMask], w: u32, h: u32) -> Raster {
    let jittered = |rng: &mut ChaCha8Rng, a: &Appearance| -> [f64; 3] {
        let normal = Normal::new(0.0, a.color_jitter.max(0.0)).expect("finite jitter");
        a.color.map(|c| (c + normal.sample(rng)).clamp(0.0, 1.0))
    };
    let distractor_look = spec.categories.first().map(|c| {
        let shifted = rotate_hue(c.appearance.color, spec.distractor_hue_delta);
        let t = spec.distractor_blend;
        Appearance {
            color: std::array::from_fn(|k| (1.0 - t) * shifted[k] + t * spec.background.color[k]),
            ..c.appearance
        }
    });
    let looks: Vec<(Appearance, [f64; 3])> = kinds
        .iter()
        .map(|k| {
            let look = match k {
                ItemKind::Target(i) => spec.categories[*i].appearance,
                ItemKind::Distractor => distractor_look.expect("validated"),
            };
            let color = jittered(rng, &look);
            (look, color)
        })
        .collect();

    let mut owner: Vec<Option<usize>> = vec![None; w as usize * h as usize];
    for (i, m) in visible.iter().enumerate() {
        for (o, &b) in owner.iter_mut().zip(m.bits()) {
            if b {
                *o = Some(i);
            }
        }
    }
    let bg_texture = Normal::new(0.0, spec.background.texture_sigma).expect("finite sigma");
    let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
    let bg_color = spec.background.color;
    let mut pixels = Vec::with_capacity(owner.len());
    for o in &owner {
        let rgb = match o {
            Some(i) => {
                let (look, base) = &looks[*i];
                let t = Normal::new(0.0, look.texture_sigma).expect("finite sigma").sample(rng);
                base.map(|c| c + t)
            }
            None => {
                let t = bg_texture.sample(rng);
                bg_color.map(|c| c + t)
            }
        };
        pixels.push(rgb.map(|c| (c + noise.sample(rng)).clamp(0.0, 1.0)));
    }
    let mut raster = Raster::new(w, h, pixels);
    quantize(&mut raster);
    raster
}

/// Snaps channels to 8-bit levels so the in-memory scene equals its PNG.
fn quantize(raster: &mut Raster) {
    for p in raster.pixels_mut() {
        for c in p.iter_mut() {
            *c = (c.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// Rotates the hue of an RGB colour by `degrees`, keeping saturation and value.
pub fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c.clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return [r, g, b];
    }
    let hue = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let hue = (hue + degrees).rem_euclid(360.0);
    let c = delta;
    let x = c * (1.0 - ((hue / 60.0).rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r1 + min, g1 + min, b1 + min]
}

/// Per-category instance counts of a scene's ground truth.
pub fn instance_counts(scene: &Scene) -> BTreeMap<CategoryId, usize> {
    let mut counts = BTreeMap::new();
    for inst in &scene.instances {
        *counts.entry(inst.category_id).or_insert(0) += 1;
    }
    counts
}

/// Coffee-grain look: brown irregular particles on a light background.
pub fn coffee_category() -> CategorySpec {
    CategorySpec {
        id: 1,
        name: "coffee".into(),
        count: 30,
        appearance: Appearance {
            color: [0.42, 0.28, 0.16],
            color_jitter: 0.15,
            texture_sigma: 0.03,
        },
        radius: (6.0, 10.0),
    }
}

pub fn coffee_background() -> Appearance {
    Appearance {
        color: [0.86, 0.82, 0.74],
        color_jitter: 0.0,
        texture_sigma: 0.02,
    }
}

impl SceneSpec {
    /// A 128x128 coffee-like scene with `count` grains.
    pub fn coffee(overlap: OverlapMode, count: u32, seed: u64) -> Self {
        Self {
            width: 128,
            height: 128,
            categories: vec![CategorySpec {
                count,
                ..coffee_category()
            }],
            overlap,
            distractor_count: 0,
            distractor_hue_delta: 120.0,
            distractor_blend: 0.0,
            background: coffee_background(),
            noise_sigma: 0.01,
            min_visible_area: 30,
            seed,
        }
    }
}
