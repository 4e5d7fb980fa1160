//! Face detection and embedding interfaces, plus nearest-identity matching
//! against a labeled registry of enrolled faces.
//!
//! Matching assigns the registry label whose closest template minimizes the
//! Euclidean distance to the probe. A match is *accepted* only when that
//! distance is within the threshold `tau`, so bystanders far from every
//! enrolled identity are filtered out instead of being assigned the nearest
//! label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{FrameRecord, Image};

/// Default acceptance threshold for unit-norm embeddings.
pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    #[serde(default = "full_confidence")]
    pub confidence: f64,
}

fn full_confidence() -> f64 {
    1.0
}

impl FaceBox {
    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if self.w == 0 || self.h == 0 {
            return Err(format!("box {}x{} must have positive size", self.w, self.h));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceEmbedding {
    vector: Vec<f64>,
    normalized: bool,
}

impl FaceEmbedding {
    /// Wrap a raw vector; `normalized` reflects whether it already has unit norm.
    pub fn new(vector: Vec<f64>) -> Self {
        let normalized = (l2_norm(&vector) - 1.0).abs() <= 1e-9;
        FaceEmbedding { vector, normalized }
    }

    /// ℓ2-normalize. Vectors already within 1e-12 of unit norm are kept bit-exact.
    pub fn normalized(vector: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&vector);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Embedding(format!("cannot normalize vector with norm {norm}")));
        }
        if (norm - 1.0).abs() <= 1e-12 {
            return Ok(FaceEmbedding {
                vector,
                normalized: true,
            });
        }
        Ok(FaceEmbedding {
            vector: vector.into_iter().map(|x| x / norm).collect(),
            normalized: true,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vector
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance, accumulated in index order.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// What a detector hands to the embedder.
#[derive(Debug, Clone, PartialEq)]
pub enum FacePayload {
    Crop(Image),
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedFace {
    pub face_box: FaceBox,
    pub payload: FacePayload,
    /// Position of the source annotation, for ground-truth lookups.
    pub annotation_index: usize,
}

pub trait FaceDetector: Send + Sync {
    fn detect(&self, frame: &FrameRecord) -> Result<Vec<DetectedFace>>;
}

pub trait FaceEmbedder: Send + Sync {
    fn embed(&self, face: &FacePayload) -> Result<FaceEmbedding>;
}

/// Reads faces from frame annotations. Annotations carrying an embedding are
/// passed through untouched; otherwise the box is cropped from the image.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnnotationDetector;

impl FaceDetector for AnnotationDetector {
    fn detect(&self, frame: &FrameRecord) -> Result<Vec<DetectedFace>> {
        frame
            .annotations
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let payload = match (&a.embedding, &frame.image) {
                    (Some(e), _) => FacePayload::Embedding(e.clone()),
                    (None, Some(img)) => {
                        FacePayload::Crop(img.crop(&a.face_box).map_err(|e| Error::Detection {
                            frame_index: frame.frame_index,
                            message: e.to_string(),
                        })?)
                    }
                    (None, None) => {
                        return Err(Error::Detection {
                            frame_index: frame.frame_index,
                            message: format!("annotation {i} has neither embedding nor image"),
                        })
                    }
                };
                Ok(DetectedFace {
                    face_box: a.face_box,
                    payload,
                    annotation_index: i,
                })
            })
            .collect()
    }
}

#[derive(Clone)]
pub enum DetectorHandle {
    Annotations,
    Plugin(Arc<dyn FaceDetector>),
}

impl std::fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DetectorHandle::Annotations => f.write_str("Annotations"),
            DetectorHandle::Plugin(_) => f.write_str("Plugin(..)"),
        }
    }
}

pub fn detect_faces(frame: &FrameRecord, detector: &DetectorHandle) -> Result<Vec<DetectedFace>> {
    match detector {
        DetectorHandle::Annotations => AnnotationDetector.detect(frame),
        DetectorHandle::Plugin(p) => p.detect(frame).map_err(|e| match e {
            e @ Error::Detection { .. } => e,
            other => Error::Detection {
                frame_index: frame.frame_index,
                message: other.to_string(),
            },
        }),
    }
}

/// Crops are resampled onto this grid before projection.
const HASH_GRID: usize = 16;

/// Deterministic pixel → unit-vector projection with pseudo-random weights
/// derived from `seed`. Stands in for a real face-embedding network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashProjection {
    pub dimension: usize,
    pub seed: u64,
}

impl HashProjection {
    fn weight(&self, input: usize, output: usize) -> f64 {
        let key = (input as u64) * (self.dimension as u64) + output as u64;
        let h = crate::splitmix64(self.seed ^ crate::splitmix64(key));
        // top 53 bits → [-1, 1)
        ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn project(&self, crop: &Image) -> Result<FaceEmbedding> {
        let mut out = vec![0.0; self.dimension];
        for gy in 0..HASH_GRID {
            let y = gy * crop.height() / HASH_GRID;
            for gx in 0..HASH_GRID {
                let x = gx * crop.width() / HASH_GRID;
                let px = crop.pixel(y, x);
                for (c, v) in px.iter().enumerate() {
                    let input = (gy * HASH_GRID + gx) * 3 + c;
                    let value = (f64::from(*v) + 1.0) / 256.0;
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += self.weight(input, j) * value;
                    }
                }
            }
        }
        FaceEmbedding::normalized(out)
    }
}

#[derive(Clone)]
pub enum EmbedderHandle {
    /// Uses annotation embeddings as-is (normalized); rejects pixel crops.
    Passthrough { dimension: usize },
    /// Projects crops with [`HashProjection`]; embeddings pass through.
    HashProjection(HashProjection),
    Plugin(Arc<dyn FaceEmbedder>),
}

impl std::fmt::Debug for EmbedderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbedderHandle::Passthrough { dimension } => {
                write!(f, "Passthrough {{ dimension: {dimension} }}")
            }
            EmbedderHandle::HashProjection(h) => write!(f, "{h:?}"),
            EmbedderHandle::Plugin(_) => f.write_str("Plugin(..)"),
        }
    }
}

impl EmbedderHandle {
    pub fn dimension(&self) -> Option<usize> {
        match self {
            EmbedderHandle::Passthrough { dimension } => Some(*dimension),
            EmbedderHandle::HashProjection(h) => Some(h.dimension),
            EmbedderHandle::Plugin(_) => None,
        }
    }
}

pub fn embed(face: &FacePayload, embedder: &EmbedderHandle) -> Result<FaceEmbedding> {
    let out = match (embedder, face) {
        (EmbedderHandle::Plugin(p), _) => p.embed(face)?,
        (_, FacePayload::Embedding(v)) => {
            if v.is_empty() {
                return Err(Error::Embedding("empty embedding".into()));
            }
            FaceEmbedding::normalized(v.clone())?
        }
        (EmbedderHandle::HashProjection(h), FacePayload::Crop(img)) => h.project(img)?,
        (EmbedderHandle::Passthrough { .. }, FacePayload::Crop(_)) => {
            return Err(Error::Embedding(
                "passthrough embedder received a pixel crop".into(),
            ))
        }
    };
    if let Some(d) = embedder.dimension() {
        if out.dimension() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: out.dimension(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub label: String,
    pub distance: f64,
    pub accepted: bool,
}

/// Labeled identity database. Each label holds one or more templates.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRegistry {
    dimension: usize,
    entries: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDoc {
    dimension: usize,
    entries: Vec<RegistryDocEntry>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDocEntry {
    label: String,
    templates: Vec<Vec<f64>>,
}

impl FaceRegistry {
    pub fn new(dimension: usize) -> Self {
        FaceRegistry {
            dimension,
            entries: BTreeMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of distinct identities.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn templates(&self, label: &str) -> Option<&[Vec<f64>]> {
        self.entries.get(label).map(Vec::as_slice)
    }

    /// Add a template under `label`, creating the identity if needed.
    pub fn register_face(&mut self, probe: &FaceEmbedding, label: &str) -> Result<()> {
        if label.is_empty() {
            return Err(Error::InvalidInput("registry label must be non-empty".into()));
        }
        self.check_dimension(probe.dimension())?;
        self.entries
            .entry(label.to_string())
            .or_default()
            .push(probe.as_slice().to_vec());
        Ok(())
    }

    fn check_dimension(&self, d: usize) -> Result<()> {
        if d != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: d,
            });
        }
        Ok(())
    }

    /// Nearest identity by minimum template distance. Returns `Ok(None)` only
    /// for an empty registry. Equal distances resolve to the lexicographically
    /// smallest label.
    pub fn match_identity(&self, probe: &FaceEmbedding, tau: f64) -> Result<Option<MatchResult>> {
        if !(tau >= 0.0) {
            return Err(Error::InvalidInput(format!("threshold must be non-negative, got {tau}")));
        }
        self.check_dimension(probe.dimension())?;
        let p = probe.as_slice();
        let mut best: Option<(&str, f64)> = None;
        // BTreeMap iterates labels in ascending order, so a strict `<` keeps
        // the smallest label on ties.
        for (label, templates) in &self.entries {
            for t in templates {
                let d = l2_distance(t, p);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((label, d));
                }
            }
        }
        Ok(best.map(|(label, distance)| MatchResult {
            label: label.to_string(),
            distance,
            accepted: distance <= tau,
        }))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RegistryDoc = serde_json::from_str(text)?;
        let mut reg = FaceRegistry::new(doc.dimension);
        for e in doc.entries {
            if reg.entries.contains_key(&e.label) {
                return Err(Error::InvalidInput(format!("duplicate registry label {}", e.label)));
            }
            if e.label.is_empty() {
                return Err(Error::InvalidInput("registry label must be non-empty".into()));
            }
            for t in &e.templates {
                reg.check_dimension(t.len())?;
            }
            reg.entries.insert(e.label, e.templates);
        }
        Ok(reg)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = RegistryDoc {
            dimension: self.dimension,
            entries: self
                .entries
                .iter()
                .map(|(label, templates)| RegistryDocEntry {
                    label: label.clone(),
                    templates: templates.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FaceRegistry::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Registry shared between concurrent matchers and a serialized writer.
/// Readers take an immutable snapshot; writers copy-on-write.
#[derive(Debug, Clone)]
pub struct SharedRegistry {
    inner: Arc<RwLock<Arc<FaceRegistry>>>,
}

impl SharedRegistry {
    pub fn new(registry: FaceRegistry) -> Self {
        SharedRegistry {
            inner: Arc::new(RwLock::new(Arc::new(registry))),
        }
    }

    pub fn snapshot(&self) -> Arc<FaceRegistry> {
        Arc::clone(&self.inner.read().expect("registry lock poisoned"))
    }

    pub fn register_face(&self, probe: &FaceEmbedding, label: &str) -> Result<()> {
        let mut guard = self.inner.write().expect("registry lock poisoned");
        Arc::make_mut(&mut guard).register_face(probe, label)
    }
}
