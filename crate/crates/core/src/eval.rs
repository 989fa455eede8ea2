//! AP75/AR75 evaluation of detections against instance ground truth.
//!
//! Matching follows the COCO convention at a single IoU level: detections are
//! ranked by confidence and each one claims the best still-unmatched ground
//! truth instance of its category in its image. AP is the 101-point
//! interpolated average precision, AR the fraction of matched instances.
//! Per-category values are averaged without weights.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotatedDataset, Annotation, AnnotationId, CategoryId, Detection, ImageId};
use crate::mask::{nms, MaskError};

pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detection references image {0} which has no ground truth entry")]
    UnknownImage(ImageId),
    #[error("no ground-truth instances to evaluate against")]
    NoGroundTruth,
    #[error("the testing partition is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Evaluation knobs shared with the loop configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub eval_iou: f64,
    pub nms_iou: f64,
    pub max_dets_per_image: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            eval_iou: 0.75,
            nms_iou: 0.5,
            max_dets_per_image: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchEntry {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub confidence: f64,
    /// Position of the detection in the input list.
    pub index: usize,
    pub matched_gt: Option<AnnotationId>,
    pub iou: f64,
}

impl MatchEntry {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// Detections in global descending-confidence order.
    pub entries: Vec<MatchEntry>,
    pub matched: BTreeMap<ImageId, Vec<AnnotationId>>,
    pub n_gt: BTreeMap<CategoryId, usize>,
}

impl MatchResult {
    pub fn total_gt(&self) -> usize {
        self.n_gt.values().sum()
    }

    pub fn total_det(&self) -> usize {
        self.entries.len()
    }
}

/// Greedily matches detections to ground truth at `iou_threshold`.
///
/// `ground_truth` must contain an entry (possibly empty) for every image a
/// detection may reference.
pub fn greedy_match(
    ground_truth: &BTreeMap<ImageId, Vec<Annotation>>,
    detections: &[Detection],
    iou_threshold: f64,
) -> Result<MatchResult, EvalError> {
    if let Some(d) = detections.iter().find(|d| !ground_truth.contains_key(&d.image_id)) {
        return Err(EvalError::UnknownImage(d.image_id));
    }
    let mut n_gt: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for a in ground_truth.values().flatten() {
        *n_gt.entry(a.category_id).or_default() += 1;
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.confidence
            .total_cmp(&da.confidence)
            .then(da.image_id.cmp(&db.image_id))
            .then(a.cmp(&b))
    });

    let mut taken: HashMap<ImageId, Vec<bool>> = ground_truth
        .iter()
        .map(|(&id, gts)| (id, vec![false; gts.len()]))
        .collect();
    let mut entries = Vec::with_capacity(detections.len());
    for i in order {
        let d = &detections[i];
        let gts = &ground_truth[&d.image_id];
        let used = taken.get_mut(&d.image_id).expect("image present");
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.category_id != d.category_id {
                continue;
            }
            let iou = d.mask.iou_or_zero(&gt.mask);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let (matched_gt, iou) = match best {
            Some((g, iou)) => {
                used[g] = true;
                (Some(gts[g].id), iou)
            }
            None => (None, 0.0),
        };
        entries.push(MatchEntry {
            image_id: d.image_id,
            category_id: d.category_id,
            confidence: d.confidence,
            index: i,
            matched_gt,
            iou,
        });
    }

    let mut matched: BTreeMap<ImageId, Vec<AnnotationId>> = BTreeMap::new();
    for e in &entries {
        if let Some(g) = e.matched_gt {
            matched.entry(e.image_id).or_default().push(g);
        }
    }
    Ok(MatchResult { entries, matched, n_gt })
}

/// 101-point interpolated AP from ranked TP/FP flags.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || ranked_tp.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut cum_tp = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    for (k, &flag) in ranked_tp.iter().enumerate() {
        tp += flag as usize;
        cum_tp.push(tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Precision envelope: best precision at this rank or any later one.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        // First rank whose recall reaches i / 100, compared exactly.
        while k < cum_tp.len() && cum_tp[k] * 100 < i * n_gt {
            k += 1;
        }
        if k < cum_tp.len() {
            total += precision[k];
        }
    }
    total / RECALL_POINTS as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub ap75: f64,
    pub ar75: f64,
    pub n_detected: usize,
    pub n_gt: usize,
}

/// Per-category AP and AR for every category with ground truth.
pub fn category_metrics(result: &MatchResult) -> BTreeMap<CategoryId, CategoryMetrics> {
    let mut out = BTreeMap::new();
    for (&cat, &n_gt) in &result.n_gt {
        if n_gt == 0 {
            continue;
        }
        let flags: Vec<bool> = result
            .entries
            .iter()
            .filter(|e| e.category_id == cat)
            .map(MatchEntry::is_tp)
            .collect();
        let tp = flags.iter().filter(|&&f| f).count();
        out.insert(
            cat,
            CategoryMetrics {
                ap75: average_precision(&flags, n_gt),
                ar75: tp as f64 / n_gt as f64,
                n_detected: flags.len(),
                n_gt,
            },
        );
    }
    out
}

/// Overall `(AP, AR)`, averaged over categories that have ground truth.
pub fn compute_metrics(result: &MatchResult) -> Result<(f64, f64), EvalError> {
    let per_cat = category_metrics(result);
    if per_cat.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let n = per_cat.len() as f64;
    let ap = per_cat.values().map(|m| m.ap75).sum::<f64>() / n;
    let ar = per_cat.values().map(|m| m.ar75).sum::<f64>() / n;
    Ok((ap, ar))
}

/// One evaluation of a model on the testing partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u32,
    pub ap75: f64,
    pub ar75: f64,
    /// Post-NMS detections on testing images.
    pub n_detected: usize,
    pub n_gt: usize,
    pub per_category: BTreeMap<CategoryId, CategoryMetrics>,
}

/// Applies per-image NMS and the per-image detection cap, keeping only
/// detections on the given images. Returns the surviving detections and the
/// post-NMS count before capping.
pub fn postprocess(
    detections: &[Detection],
    images: &BTreeSet<ImageId>,
    params: &EvalParams,
) -> Result<(Vec<Detection>, usize), EvalError> {
    let mut by_image: BTreeMap<ImageId, Vec<Detection>> = BTreeMap::new();
    for d in detections.iter().filter(|d| images.contains(&d.image_id)) {
        by_image.entry(d.image_id).or_default().push(d.clone());
    }
    let mut out = Vec::new();
    let mut n_post_nms = 0;
    for dets in by_image.values() {
        let kept = nms(dets, params.nms_iou)?;
        n_post_nms += kept.len();
        // nms returns survivors in descending confidence order.
        out.extend(kept.into_iter().take(params.max_dets_per_image));
    }
    Ok((out, n_post_nms))
}

/// Scores detections against the testing partition of `dataset`.
pub fn evaluate_dataset(
    dataset: &AnnotatedDataset,
    detections: &[Detection],
    params: &EvalParams,
    iteration: u32,
) -> Result<MetricsRecord, EvalError> {
    let testing = &dataset.partitions.testing;
    if testing.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut gt: BTreeMap<ImageId, Vec<Annotation>> = testing.iter().map(|&id| (id, Vec::new())).collect();
    for a in dataset.annotations.iter().filter(|a| testing.contains(&a.image_id)) {
        gt.get_mut(&a.image_id).expect("testing image").push(a.clone());
    }
    let (kept, n_detected) = postprocess(detections, testing, params)?;
    let result = greedy_match(&gt, &kept, params.eval_iou)?;
    let (ap75, ar75) = compute_metrics(&result)?;
    Ok(MetricsRecord {
        iteration,
        ap75,
        ar75,
        n_detected,
        n_gt: result.total_gt(),
        per_category: category_metrics(&result),
    })
}
