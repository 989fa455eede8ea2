//! Iterative self-learning annotation for instance segmentation.
//!
//! Starting from a handful of human annotations, the loop alternately trains
//! a pluggable detector and promotes its confidence-filtered detections to
//! ground truth, recording AP75/AR75 on a held-out partition after every
//! round.
//!
//! - [`data`]: dataset model and COCO-compatible files.
//! - [`mask`]: run-length masks, rasterization, IoU, NMS.
//! - [`eval`]: AP75/AR75 evaluation.
//! - [`detector`]: the detector contract and its subprocess protocol.
//! - [`refdetect`]: the built-in statistical reference detector.
//! - [`synth`]: seeded synthetic scenes and experiments.
//! - [`selfloop`]: the self-learning loop, checkpoints, grid search and
//!   leave-one-image-out evaluation.

pub mod data;
pub mod detector;
pub mod eval;
pub mod mask;
pub mod refdetect;
pub mod seeds;
pub mod selfloop;
pub mod synth;
