//! Newline-delimited JSON protocol between the loop and an external
//! detector process.
//!
//! Every line on the child's stdin is a [`Request`] and every line on its
//! stdout a [`Response`] carrying the same `id`. Requests are strictly
//! sequential. Images travel by absolute file path, masks in the RLE object
//! form `{"size": [h, w], "counts": [...]}`, and detector state as base64.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BuiltinDetector, Detector, DetectorError, DetectorHandle, ImageStore, TrainJob};
use crate::data::{AnnotationId, CategoryId, Detection, ImageId, ImageRecord};
use crate::mask::RleMask;
use crate::refdetect::RefDetectorParams;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub cmd: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    /// Null only when the request line could not be parsed at all.
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn success(id: u64, payload: Value) -> Self {
        Self {
            id: Some(id),
            ok: true,
            payload: Some(payload),
            error: None,
        }
    }

    pub fn failure(id: Option<u64>, error: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            payload: None,
            error: Some(error.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAnnotation {
    pub id: AnnotationId,
    pub category_id: CategoryId,
    pub segmentation: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTrainImage {
    #[serde(flatten)]
    pub image: WireImage,
    pub annotations: Vec<WireAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPayload {
    pub images: Vec<WireTrainImage>,
    pub epochs: u32,
    pub batch_size: u32,
    pub steps_per_epoch: u32,
    pub seed: u64,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferPayload {
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub segmentation: RleMask,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsPayload {
    pub detections: Vec<WireDetection>,
}

/// Counters reported after `train` and `load`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepsPayload {
    pub trained_steps: u64,
    pub presentations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub state: String,
}

impl StatePayload {
    pub fn encode(bytes: &[u8]) -> Self {
        Self {
            state: BASE64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<u8>, DetectorError> {
        BASE64
            .decode(&self.state)
            .map_err(|e| DetectorError::Protocol(format!("state is not valid base64: {e}")))
    }
}

impl WireImage {
    pub fn from_record(image: &ImageRecord, store: &ImageStore) -> Self {
        let path = store.path_of(image);
        Self {
            id: image.id,
            width: image.width,
            height: image.height,
            path: std::path::absolute(&path).unwrap_or(path),
        }
    }

    /// The record a server reconstructs; `file_path` is the absolute path.
    pub fn to_record(&self) -> ImageRecord {
        ImageRecord {
            id: self.id,
            width: self.width,
            height: self.height,
            file_path: self.path.to_string_lossy().into_owned(),
        }
    }
}

impl WireDetection {
    pub fn into_detection(self) -> Detection {
        Detection {
            image_id: self.image_id,
            category_id: self.category_id,
            mask: self.segmentation,
            confidence: self.confidence,
        }
    }
}

impl TrainPayload {
    pub fn from_job(job: &TrainJob, store: &ImageStore) -> Self {
        Self {
            images: job
                .images
                .iter()
                .map(|(image, anns)| WireTrainImage {
                    image: WireImage::from_record(image, store),
                    annotations: anns
                        .iter()
                        .map(|a| WireAnnotation {
                            id: a.id,
                            category_id: a.category_id,
                            segmentation: a.mask.clone(),
                        })
                        .collect(),
                })
                .collect(),
            epochs: job.epochs,
            batch_size: job.batch_size,
            steps_per_epoch: job.steps_per_epoch,
            seed: job.seed,
            augment: job.augment,
        }
    }

    pub fn to_job(&self) -> TrainJob {
        TrainJob {
            images: self
                .images
                .iter()
                .map(|ti| {
                    let record = ti.image.to_record();
                    let anns = ti
                        .annotations
                        .iter()
                        .map(|a| crate::data::Annotation::human(a.id, record.id, a.category_id, a.segmentation.clone()))
                        .collect();
                    (record, anns)
                })
                .collect(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed,
            augment: self.augment,
        }
    }
}

/// Serves the reference detector over the protocol until `close` or end of
/// input. Paths in requests are used as given.
pub fn serve(input: impl BufRead, mut output: impl Write, params: RefDetectorParams) -> Result<(), DetectorError> {
    let store = ImageStore::new("");
    let mut detector = BuiltinDetector::new(params)?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (response, done) = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                let done = req.cmd == "close";
                let resp = match handle(&mut detector, &store, &req) {
                    Ok(payload) => Response::success(req.id, payload),
                    Err(e) => Response::failure(Some(req.id), e.to_string()),
                };
                (resp, done)
            }
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64));
                (Response::failure(id, format!("malformed request: {e}")), false)
            }
        };
        serde_json::to_writer(&mut output, &response).map_err(|e| DetectorError::Serialization(e.to_string()))?;
        output.write_all(b"\n")?;
        output.flush()?;
        if done {
            break;
        }
    }
    Ok(())
}

fn handle(detector: &mut BuiltinDetector, store: &ImageStore, req: &Request) -> Result<Value, DetectorError> {
    let parse = |what: &str| DetectorError::Protocol(format!("bad {what} payload"));
    match req.cmd.as_str() {
        "hello" => Ok(json!(Hello {
            protocol: PROTOCOL_VERSION,
            name: "bootseg-refdetect".into(),
        })),
        "train" => {
            let payload: TrainPayload = serde_json::from_value(req.payload.clone()).map_err(|_| parse("train"))?;
            let job = payload.to_job();
            job.validate()?;
            detector.train(&job, store)?;
            Ok(json!(steps_of(detector)))
        }
        "infer" => {
            let payload: InferPayload = serde_json::from_value(req.payload.clone()).map_err(|_| parse("infer"))?;
            if detector.trained_steps() == 0 {
                return Err(DetectorError::NotTrained);
            }
            let records: Vec<ImageRecord> = payload.images.iter().map(WireImage::to_record).collect();
            let detections = detector
                .infer(&records, store)?
                .into_iter()
                .map(|d| WireDetection {
                    image_id: d.image_id,
                    category_id: d.category_id,
                    segmentation: d.mask,
                    confidence: d.confidence,
                })
                .collect();
            Ok(json!(DetectionsPayload { detections }))
        }
        "save" => Ok(json!(StatePayload::encode(&detector.save_state()?))),
        "load" => {
            let payload: StatePayload = serde_json::from_value(req.payload.clone()).map_err(|_| parse("load"))?;
            let restored = BuiltinDetector::from_state(&payload.decode()?)?;
            *detector = restored;
            Ok(json!(steps_of(detector)))
        }
        "close" => Ok(json!({})),
        other => Err(DetectorError::Protocol(format!("unknown command `{other}`"))),
    }
}

fn steps_of(detector: &BuiltinDetector) -> StepsPayload {
    StepsPayload {
        trained_steps: detector.trained_steps(),
        presentations: detector.presentations(),
    }
}

/// Outcome of [`run_conformance`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceReport {
    pub first: Vec<Detection>,
    pub second: Vec<Detection>,
    pub digest_before: String,
    pub digest_after: String,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.first == self.second && self.digest_before == self.digest_after
    }
}

/// Drives hello, train, infer, save, load, infer, close against a detector
/// and compares the two inference results.
pub fn run_conformance(
    kind: super::DetectorKind,
    store: std::sync::Arc<ImageStore>,
    job: &TrainJob,
    images: &[ImageRecord],
) -> Result<ConformanceReport, DetectorError> {
    let mut handle = DetectorHandle::open(kind.clone(), store.clone(), None, job.seed)?;
    handle.train(job)?;
    let first = handle.infer(images)?;
    let blob = handle.checkpoint()?;
    handle.close()?;
    let mut restored = DetectorHandle::open(kind, store, Some(&blob), job.seed)?;
    let second = restored.infer(images)?;
    let digest_after = restored.digest()?;
    restored.close()?;
    Ok(ConformanceReport {
        first,
        second,
        digest_before: blob.digest,
        digest_after,
    })
}
