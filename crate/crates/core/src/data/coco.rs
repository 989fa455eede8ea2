use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AnnotatedDataset, Annotation, CategoryDef, DataError, ImageRecord, Partitions, Source, DEFAULT_MAX_PIXELS,
};
use crate::mask::{rasterize_polygon, rle_encode, BinaryMask, RleMask};

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub max_pixels: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_pixels: DEFAULT_MAX_PIXELS,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partitions: Option<CocoPartitions>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: Value,
    // Area and bbox are always re-derived from the mask on load.
    #[serde(default, skip_deserializing)]
    area: u64,
    #[serde(default, skip_deserializing)]
    bbox: [u32; 4],
    #[serde(default)]
    source: Option<Source>,
    #[serde(default)]
    confidence: Option<f64>,
}

#[derive(Serialize, Deserialize, Default)]
struct CocoPartitions {
    #[serde(default)]
    bootstrapping: Vec<u64>,
    #[serde(default)]
    training: Vec<u64>,
    #[serde(default)]
    testing: Vec<u64>,
}

pub fn load_coco(path: impl AsRef<Path>) -> Result<AnnotatedDataset, DataError> {
    load_coco_with(path, LoadOptions::default())
}

pub fn load_coco_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<AnnotatedDataset, DataError> {
    let text = fs::read_to_string(path)?;
    parse_coco(&text, options)
}

/// Parses and validates a COCO-compatible dataset document.
pub fn parse_coco(text: &str, options: LoadOptions) -> Result<AnnotatedDataset, DataError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DataError::Parse(e.to_string()))?;
    let file: CocoFile = serde_json::from_value(value).map_err(|e| DataError::Schema(e.to_string()))?;

    let categories = file
        .categories
        .into_iter()
        .map(|c| CategoryDef { id: c.id, name: c.name })
        .collect();
    let images: Vec<ImageRecord> = file
        .images
        .into_iter()
        .map(|im| ImageRecord {
            id: im.id,
            width: im.width,
            height: im.height,
            file_path: im.file_name,
        })
        .collect();

    let mut annotations = Vec::with_capacity(file.annotations.len());
    for a in file.annotations {
        let image = images
            .iter()
            .find(|im| im.id == a.image_id)
            .ok_or_else(|| DataError::Schema(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
        let mask = parse_segmentation(&a.segmentation, image, a.id)?;
        let source = a.source.unwrap_or(Source::Human);
        let confidence = a.confidence.unwrap_or(1.0);
        annotations.push(Annotation::new(
            a.id,
            a.image_id,
            a.category_id,
            mask,
            source,
            confidence,
        ));
    }

    let all_ids: BTreeSet<u64> = images.iter().map(|im| im.id).collect();
    let partitions = match file.partitions {
        None => Partitions {
            training: all_ids,
            ..Partitions::default()
        },
        Some(p) => {
            let bootstrapping: BTreeSet<u64> = p.bootstrapping.into_iter().collect();
            let mut training: BTreeSet<u64> = p.training.into_iter().collect();
            let testing: BTreeSet<u64> = p.testing.into_iter().collect();
            for id in &all_ids {
                if !bootstrapping.contains(id) && !training.contains(id) && !testing.contains(id) {
                    training.insert(*id);
                }
            }
            Partitions {
                bootstrapping,
                training,
                testing,
            }
        }
    };

    let mut dataset = AnnotatedDataset {
        categories,
        images,
        annotations,
        partitions,
    };
    dataset.validate(options.max_pixels)?;
    dataset.sort();
    Ok(dataset)
}

fn parse_segmentation(seg: &Value, image: &ImageRecord, ann_id: u64) -> Result<RleMask, DataError> {
    match seg {
        Value::Object(obj) => {
            let size: [u32; 2] = obj
                .get("size")
                .cloned()
                .ok_or_else(|| DataError::Schema(format!("annotation {ann_id}: RLE without size")))
                .and_then(|v| {
                    serde_json::from_value(v)
                        .map_err(|e| DataError::Schema(format!("annotation {ann_id}: bad RLE size: {e}")))
                })?;
            let counts = match obj.get("counts") {
                Some(Value::String(_)) => {
                    return Err(DataError::Schema(format!(
                        "annotation {ann_id}: compressed RLE strings are not supported"
                    )))
                }
                Some(v) => serde_json::from_value::<Vec<u64>>(v.clone())
                    .map_err(|e| DataError::Schema(format!("annotation {ann_id}: bad RLE counts: {e}")))?,
                None => return Err(DataError::Schema(format!("annotation {ann_id}: RLE without counts"))),
            };
            let [height, width] = size;
            if height != image.height || width != image.width {
                return Err(DataError::Geometry(format!(
                    "annotation {ann_id} mask is {height}x{width} but image {} is {}x{}",
                    image.id, image.height, image.width
                )));
            }
            RleMask::new(height, width, counts).map_err(|e| DataError::Geometry(format!("annotation {ann_id}: {e}")))
        }
        Value::Array(polys) => {
            let mut mask = BinaryMask::new(image.height, image.width);
            for poly in polys {
                let coords: Vec<f64> = serde_json::from_value(poly.clone())
                    .map_err(|e| DataError::Schema(format!("annotation {ann_id}: bad polygon: {e}")))?;
                if coords.len() % 2 != 0 {
                    return Err(DataError::Schema(format!(
                        "annotation {ann_id}: polygon has an odd number of coordinates"
                    )));
                }
                let vertices: Vec<(f64, f64)> = coords.chunks(2).map(|c| (c[0], c[1])).collect();
                let part = rasterize_polygon(&vertices, image.height, image.width)
                    .map_err(|e| DataError::Geometry(format!("annotation {ann_id}: {e}")))?;
                for row in 0..image.height {
                    for col in 0..image.width {
                        if part.get(row, col) {
                            mask.set(row, col, true);
                        }
                    }
                }
            }
            Ok(rle_encode(&mask))
        }
        _ => Err(DataError::Schema(format!(
            "annotation {ann_id}: segmentation must be a polygon list or an RLE object"
        ))),
    }
}

/// Serializes a dataset deterministically: ids ascending, fixed key order.
pub fn to_coco_string(dataset: &AnnotatedDataset) -> String {
    let mut sorted = dataset.clone();
    sorted.sort();
    let file = CocoFile {
        images: sorted
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id,
                width: im.width,
                height: im.height,
                file_name: im.file_path.clone(),
            })
            .collect(),
        annotations: sorted
            .annotations
            .iter()
            .map(|a| CocoAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                segmentation: json!({
                    "size": [a.mask.height(), a.mask.width()],
                    "counts": a.mask.counts(),
                }),
                area: a.area,
                bbox: a.bbox.to_array(),
                source: Some(a.source),
                confidence: Some(a.confidence),
            })
            .collect(),
        categories: sorted
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
        partitions: Some(CocoPartitions {
            bootstrapping: sorted.partitions.bootstrapping.iter().copied().collect(),
            training: sorted.partitions.training.iter().copied().collect(),
            testing: sorted.partitions.testing.iter().copied().collect(),
        }),
    };
    let mut text = serde_json::to_string(&file).expect("dataset serializes");
    text.push('\n');
    text
}

pub fn save_coco(dataset: &AnnotatedDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, to_coco_string(dataset))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<AnnotatedDataset, DataError> {
        parse_coco(text, LoadOptions::default())
    }

    const MINIMAL: &str = r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
        "categories":[{"id":1,"name":"grain"}]}"#;

    #[test]
    fn minimal_file_loads_empty() {
        let d = parse(MINIMAL).unwrap();
        assert_eq!(d.images.len(), 1);
        assert!(d.annotations.is_empty());
        assert!(d.partitions.training.contains(&1));
    }

    #[test]
    fn polygon_is_rasterized() {
        let d = parse(
            r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
            "categories":[{"id":1,"name":"grain"}],
            "annotations":[{"id":1,"image_id":1,"category_id":1,"segmentation":[[0,0,2,0,2,2,0,2]],"area":4.0,"bbox":[0,0,2,2]}]}"#,
        )
        .unwrap();
        let a = &d.annotations[0];
        assert_eq!(a.area, 4);
        assert_eq!(a.bbox.to_array(), [0, 0, 2, 2]);
        assert_eq!(a.source, Source::Human);
        assert_eq!(a.confidence, 1.0);
    }

    #[test]
    fn mask_size_mismatch_is_geometry_error() {
        let err = parse(
            r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
            "categories":[{"id":1,"name":"grain"}],
            "annotations":[{"id":1,"image_id":1,"category_id":1,"segmentation":{"size":[3,3],"counts":[9]}}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Geometry(_)), "{err}");
    }

    #[test]
    fn error_kinds() {
        assert!(matches!(parse("{not json"), Err(DataError::Parse(_))));
        assert!(matches!(parse(r#"{"images":[]}"#), Err(DataError::Schema(_))));
        let dangling = r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
            "categories":[{"id":1,"name":"grain"}],
            "annotations":[{"id":1,"image_id":1,"category_id":7,"segmentation":{"size":[4,4],"counts":[16]}}]}"#;
        assert!(matches!(parse(dangling), Err(DataError::Schema(_))));
        let compressed = r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
            "categories":[{"id":1,"name":"grain"}],
            "annotations":[{"id":1,"image_id":1,"category_id":1,"segmentation":{"size":[4,4],"counts":"abc"}}]}"#;
        assert!(matches!(parse(compressed), Err(DataError::Schema(_))));
        let overlap = r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
            "categories":[{"id":1,"name":"grain"}],
            "partitions":{"training":[1],"testing":[1]}}"#;
        assert!(matches!(parse(overlap), Err(DataError::Partition(_))));
    }

    #[test]
    fn pixel_cap_is_enforced() {
        let err = parse_coco(MINIMAL, LoadOptions { max_pixels: 15 }).unwrap_err();
        assert!(matches!(err, DataError::Geometry(_)));
    }

    #[test]
    fn save_sorts_annotations() {
        let mut d = parse(MINIMAL).unwrap();
        for id in [3, 1, 2] {
            d.annotations.push(Annotation::human(
                id,
                1,
                1,
                RleMask::new(4, 4, vec![id, 1, 15 - id]).unwrap(),
            ));
        }
        let text = to_coco_string(&d);
        let v: Value = serde_json::from_str(&text).unwrap();
        let ids: Vec<u64> = v["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["id"].as_u64().unwrap())
            .collect();
        assert_eq!(ids, vec![1, 2, 3]);
        let back = parse(&text).unwrap();
        let mut expected = d.clone();
        expected.sort();
        assert_eq!(back, expected);
        assert_eq!(to_coco_string(&back), text);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let d = AnnotatedDataset::default();
        let back = parse(&to_coco_string(&d)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn inferred_source_roundtrips() {
        let mut d = parse(MINIMAL).unwrap();
        d.annotations.push(Annotation::new(
            5,
            1,
            1,
            RleMask::new(4, 4, vec![2, 3, 11]).unwrap(),
            Source::Inferred(4),
            0.3125,
        ));
        let text = to_coco_string(&d);
        assert!(text.contains(r#""source":{"inferred":4}"#));
        assert_eq!(parse(&text).unwrap(), d);
    }
}
