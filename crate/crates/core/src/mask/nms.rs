use super::MaskError;
use crate::data::Detection;

/// Greedy class-aware non-maximum suppression on mask IoU.
///
/// Detections are visited by descending confidence, ties broken by input
/// position. A detection survives iff its IoU with every survivor of the same
/// category is at most `iou_threshold`. Survivors are returned in visiting
/// order, unchanged.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, MaskError> {
    if let Some(first) = detections.first() {
        if let Some(other) = detections.iter().find(|d| d.image_id != first.image_id) {
            return Err(MaskError::MixedImage(first.image_id, other.image_id));
        }
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .total_cmp(&detections[a].confidence)
            .then(a.cmp(&b))
    });

    let boxes: Vec<_> = detections.iter().map(|d| d.mask.bbox()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            let other = &detections[k];
            if other.category_id != d.category_id {
                return false;
            }
            let overlapping = match (boxes[i], boxes[k]) {
                (Some(a), Some(b)) => a.intersects(&b),
                _ => false,
            };
            overlapping && d.mask.iou_or_zero(&other.mask) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| detections[i].clone()).collect())
}
