//! The pluggable detector contract.
//!
//! A [`DetectorHandle`] wraps either the built-in reference detector or an
//! external process speaking the newline-delimited protocol in [`protocol`].
//! Handles train on annotated images, infer on unannotated ones, and
//! checkpoint their full state into a [`DetectorStateBlob`].

mod builtin;
mod external;
pub mod protocol;

pub use builtin::BuiltinDetector;
pub use external::ExternalDetector;

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Annotation, Detection, ImageRecord};
use crate::refdetect::{Raster, RefDetectError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("failed to start detector process: {0}")]
    Spawn(String),
    #[error("incompatible detector state: {0}")]
    Version(String),
    #[error("empty training job: {0}")]
    EmptyJob(String),
    #[error("detector has not been trained")]
    NotTrained,
    #[error("detector protocol violation: {0}")]
    Protocol(String),
    #[error("detector state serialization failed: {0}")]
    Serialization(String),
    #[error("detector handle is closed")]
    Closed,
    #[error("cannot load image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<RefDetectError> for DetectorError {
    fn from(e: RefDetectError) -> Self {
        match e {
            RefDetectError::EmptyJob => DetectorError::EmptyJob(e.to_string()),
            RefDetectError::NotTrained => DetectorError::NotTrained,
            RefDetectError::Version(v) => DetectorError::Version(format!("state version {v}")),
            RefDetectError::Serialization(s) => DetectorError::Serialization(s),
            RefDetectError::Params(s) => DetectorError::Serialization(s),
        }
    }
}

/// Which implementation backs a handle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorKind {
    BuiltinReference,
    /// Command line of an external detector process.
    External(String),
}

impl DetectorKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DetectorKind::BuiltinReference => "builtin",
            DetectorKind::External(_) => "external",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorKind::BuiltinReference => f.write_str("builtin"),
            DetectorKind::External(cmd) => write!(f, "external:{cmd}"),
        }
    }
}

impl FromStr for DetectorKind {
    type Err = String;

    /// Parses `builtin` or `external:<command line>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "builtin" => Ok(DetectorKind::BuiltinReference),
            other => match other.strip_prefix("external:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(DetectorKind::External(cmd.trim().to_string())),
                _ => Err(format!(
                    "unknown detector kind `{s}` (expected builtin or external:<cmd>)"
                )),
            },
        }
    }
}

/// One training call's worth of work.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub images: Vec<(ImageRecord, Vec<Annotation>)>,
    pub epochs: u32,
    pub batch_size: u32,
    pub steps_per_epoch: u32,
    /// Seed of the batch-sampling and augmentation stream.
    pub seed: u64,
    pub augment: bool,
}

impl TrainJob {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.images.is_empty() {
            return Err(DetectorError::EmptyJob("no annotated images".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(DetectorError::EmptyJob(format!(
                "epochs={}, batch_size={}, steps_per_epoch={}",
                self.epochs, self.batch_size, self.steps_per_epoch
            )));
        }
        for (image, anns) in &self.images {
            if let Some(a) = anns.iter().find(|a| a.image_id != image.id) {
                return Err(DetectorError::EmptyJob(format!(
                    "annotation {} belongs to image {}, not {}",
                    a.id, a.image_id, image.id
                )));
            }
        }
        Ok(())
    }

    pub fn batches(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch as u64
    }

    pub fn presentations(&self) -> u64 {
        self.batches() * self.batch_size as u64
    }
}

/// Decodes and caches images referenced by [`ImageRecord::file_path`],
/// relative to a root directory.
#[derive(Debug, Default)]
pub struct ImageStore {
    root: PathBuf,
    cache: RwLock<HashMap<String, Arc<Raster>>>,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: RwLock::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, image: &ImageRecord) -> PathBuf {
        self.root.join(&image.file_path)
    }

    /// Registers an in-memory image under a file path.
    pub fn insert(&self, file_path: impl Into<String>, raster: Raster) {
        self.cache
            .write()
            .expect("image cache poisoned")
            .insert(file_path.into(), Arc::new(raster));
    }

    pub fn load(&self, image: &ImageRecord) -> Result<Arc<Raster>, DetectorError> {
        if let Some(r) = self.cache.read().expect("image cache poisoned").get(&image.file_path) {
            return Ok(r.clone());
        }
        let path = self.path_of(image);
        let img = image::open(&path).map_err(|e| DetectorError::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let raster = Raster::from_rgb8(&img.to_rgb8());
        if raster.width() != image.width || raster.height() != image.height {
            return Err(DetectorError::Image {
                path,
                reason: format!(
                    "decoded {}x{} but the record says {}x{}",
                    raster.width(),
                    raster.height(),
                    image.width,
                    image.height
                ),
            });
        }
        let raster = Arc::new(raster);
        self.cache
            .write()
            .expect("image cache poisoned")
            .insert(image.file_path.clone(), raster.clone());
        Ok(raster)
    }
}

/// Serialized detector state with an integrity digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorStateBlob {
    /// `builtin` or `external`.
    pub kind: String,
    pub version: u32,
    pub bytes: Vec<u8>,
    /// Lower-case hex SHA-256 of `bytes`.
    pub digest: String,
}

const BLOB_MAGIC: &[u8; 4] = b"BSDS";
pub const BLOB_VERSION: u32 = 1;

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DetectorStateBlob {
    pub fn new(kind: &str, bytes: Vec<u8>) -> Self {
        Self {
            kind: kind.to_string(),
            version: BLOB_VERSION,
            digest: digest_hex(&bytes),
            bytes,
        }
    }

    pub fn verify(&self) -> Result<(), DetectorError> {
        if self.version != BLOB_VERSION {
            return Err(DetectorError::Version(format!("blob version {}", self.version)));
        }
        if digest_hex(&self.bytes) != self.digest {
            return Err(DetectorError::Version("state digest does not match its bytes".into()));
        }
        Ok(())
    }

    /// File layout: magic, version (u32 LE), kind length (u32 LE) and kind,
    /// 32-byte digest, payload length (u64 LE) and payload.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), DetectorError> {
        let digest = hex::decode(&self.digest).map_err(|e| DetectorError::Serialization(e.to_string()))?;
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(self.kind.len() as u32).to_le_bytes())?;
        w.write_all(self.kind.as_bytes())?;
        w.write_all(&digest)?;
        w.write_all(&(self.bytes.len() as u64).to_le_bytes())?;
        w.write_all(&self.bytes)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, DetectorError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |what: &str| DetectorError::Serialization(format!("state file: {what}"));
        if buf.len() < 12 || &buf[..4] != BLOB_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(DetectorError::Version(format!("blob version {version}")));
        }
        let kind_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let mut pos = 12;
        let kind = buf
            .get(pos..pos + kind_len)
            .ok_or_else(|| bad("truncated kind"))
            .and_then(|k| String::from_utf8(k.to_vec()).map_err(|_| bad("kind is not UTF-8")))?;
        pos += kind_len;
        let digest = hex::encode(buf.get(pos..pos + 32).ok_or_else(|| bad("truncated digest"))?);
        pos += 32;
        let len = u64::from_le_bytes(
            buf.get(pos..pos + 8)
                .ok_or_else(|| bad("truncated length"))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 8;
        let bytes = buf
            .get(pos..pos + len)
            .ok_or_else(|| bad("truncated payload"))?
            .to_vec();
        if pos + len != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let blob = Self {
            kind,
            version,
            bytes,
            digest,
        };
        blob.verify()?;
        Ok(blob)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Behaviour shared by all detector implementations.
pub trait Detector: Send + Sync {
    fn train(&mut self, job: &TrainJob, store: &ImageStore) -> Result<(), DetectorError>;
    /// Must not mutate the model.
    fn infer(&self, images: &[ImageRecord], store: &ImageStore) -> Result<Vec<Detection>, DetectorError>;
    fn save_state(&self) -> Result<Vec<u8>, DetectorError>;
    fn trained_steps(&self) -> u64;
    fn presentations(&self) -> u64;
    fn close(&mut self) -> Result<(), DetectorError> {
        Ok(())
    }
}

/// An open detector.
pub struct DetectorHandle {
    kind: DetectorKind,
    seed: u64,
    store: Arc<ImageStore>,
    inner: Option<Box<dyn Detector>>,
}

impl fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DetectorHandle")
            .field("kind", &self.kind)
            .field("seed", &self.seed)
            .field("open", &self.inner.is_some())
            .finish()
    }
}

impl DetectorHandle {
    /// Opens a detector, optionally restoring a saved state.
    pub fn open(
        kind: DetectorKind,
        store: Arc<ImageStore>,
        pretrained: Option<&DetectorStateBlob>,
        seed: u64,
    ) -> Result<Self, DetectorError> {
        Self::open_with(kind, store, pretrained, seed, Default::default())
    }

    /// Like [`DetectorHandle::open`] with explicit reference-detector
    /// parameters (ignored for external detectors and when restoring).
    pub fn open_with(
        kind: DetectorKind,
        store: Arc<ImageStore>,
        pretrained: Option<&DetectorStateBlob>,
        seed: u64,
        params: crate::refdetect::RefDetectorParams,
    ) -> Result<Self, DetectorError> {
        if let Some(blob) = pretrained {
            blob.verify()?;
            if blob.kind != kind.tag() {
                return Err(DetectorError::Version(format!(
                    "state was saved by a `{}` detector, cannot restore into `{}`",
                    blob.kind,
                    kind.tag()
                )));
            }
        }
        let inner: Box<dyn Detector> = match &kind {
            DetectorKind::BuiltinReference => Box::new(match pretrained {
                Some(blob) => BuiltinDetector::from_state(&blob.bytes)?,
                None => BuiltinDetector::new(params)?,
            }),
            DetectorKind::External(cmd) => {
                let mut ext = ExternalDetector::spawn(cmd)?;
                if let Some(blob) = pretrained {
                    ext.load_state(&blob.bytes)?;
                }
                Box::new(ext)
            }
        };
        Ok(Self {
            kind,
            seed,
            store,
            inner: Some(inner),
        })
    }

    pub fn kind(&self) -> &DetectorKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &Arc<ImageStore> {
        &self.store
    }

    fn inner(&self) -> Result<&dyn Detector, DetectorError> {
        self.inner.as_deref().ok_or(DetectorError::Closed)
    }

    pub fn trained_steps(&self) -> u64 {
        self.inner.as_ref().map_or(0, |d| d.trained_steps())
    }

    pub fn presentations(&self) -> u64 {
        self.inner.as_ref().map_or(0, |d| d.presentations())
    }

    pub fn train(&mut self, job: &TrainJob) -> Result<(), DetectorError> {
        job.validate()?;
        let store = self.store.clone();
        self.inner
            .as_deref_mut()
            .ok_or(DetectorError::Closed)?
            .train(job, &store)
    }

    pub fn infer(&self, images: &[ImageRecord]) -> Result<Vec<Detection>, DetectorError> {
        let inner = self.inner()?;
        if inner.trained_steps() == 0 {
            return Err(DetectorError::NotTrained);
        }
        inner.infer(images, &self.store)
    }

    pub fn checkpoint(&self) -> Result<DetectorStateBlob, DetectorError> {
        let bytes = self.inner()?.save_state()?;
        Ok(DetectorStateBlob::new(self.kind.tag(), bytes))
    }

    /// SHA-256 of the current state.
    pub fn digest(&self) -> Result<String, DetectorError> {
        Ok(self.checkpoint()?.digest)
    }

    pub fn close(&mut self) -> Result<(), DetectorError> {
        match self.inner.take() {
            Some(mut d) => d.close(),
            None => Err(DetectorError::Closed),
        }
    }
}

impl Drop for DetectorHandle {
    fn drop(&mut self) {
        if let Some(mut d) = self.inner.take() {
            let _ = d.close();
        }
    }
}
