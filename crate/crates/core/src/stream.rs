//! Frame sources: JSONL manifests of image frames and seeded synthetic streams.
//!
//! A manifest is a JSONL file. An optional first line without a `frame_index`
//! field is a header `{"stream_id": .., "fps": .., "start_ms": ..}`; every
//! other line is one frame entry:
//!
//! ```text
//! {"frame_index":0,"timestamp_ms":0,"image_path":"f0.png","annotations":[{"box":{"x":0,"y":0,"w":8,"h":8},"identity_label":"A","embedding":[..],"true_risk":0.4}]}
//! ```
//!
//! `timestamp_ms` may be omitted; it is then filled from the frame index as
//! `start_ms + round(frame_index * 1000 / fps)`, which keeps the long-run
//! drift below one millisecond.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::FaceBox;

pub const DEFAULT_FPS: f64 = 30.0;

/// An 8-bit RGB raster stored row-major as `height × width × 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidInput(format!(
                "image buffer has {} bytes, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Image::new(height, width, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::new(h as usize, w as usize, img.into_raw())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn contains(&self, b: &FaceBox) -> bool {
        (b.x as usize + b.w as usize) <= self.width && (b.y as usize + b.h as usize) <= self.height
    }

    pub fn crop(&self, b: &FaceBox) -> Result<Image> {
        if !self.contains(b) {
            return Err(Error::InvalidInput(format!(
                "box {b:?} exceeds image bounds {}x{}",
                self.height, self.width
            )));
        }
        let (x0, y0, w, h) = (b.x as usize, b.y as usize, b.w as usize, b.h as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image::new(h, w, data)
    }
}

/// Ground truth attached to a frame: where a face is and, for synthetic
/// frames, who it is and how risky it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceAnnotation {
    #[serde(rename = "box")]
    pub face_box: FaceBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_risk: Option<f64>,
}

impl FaceAnnotation {
    fn validate(&self, image: Option<&Image>) -> std::result::Result<(), String> {
        self.face_box.validate()?;
        if let Some(img) = image {
            if !img.contains(&self.face_box) {
                return Err(format!(
                    "annotation box {:?} outside {}x{} image",
                    self.face_box,
                    img.height(),
                    img.width()
                ));
            }
        }
        if let Some(r) = self.true_risk {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("true_risk {r} outside [0, 1]"));
            }
        }
        if let Some(e) = &self.embedding {
            if e.iter().any(|v| !v.is_finite()) {
                return Err("embedding contains non-finite values".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub stream_id: String,
    pub frame_index: u64,
    pub timestamp_ms: i64,
    /// `None` for embedding-only synthetic frames.
    pub image: Option<Image>,
    pub annotations: Vec<FaceAnnotation>,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<FaceAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    stream_id: String,
    #[serde(default = "default_fps")]
    fps: f64,
    #[serde(default)]
    start_ms: i64,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamManifest {
    pub stream_id: String,
    pub fps: f64,
    /// Timestamp of frame index 0 when timestamps are auto-filled.
    pub start_ms: i64,
    /// Directory that relative `image_path`s resolve against.
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl StreamManifest {
    pub fn new(stream_id: impl Into<String>, fps: f64) -> Self {
        StreamManifest {
            stream_id: stream_id.into(),
            fps,
            start_ms: 0,
            base_dir: PathBuf::from("."),
            entries: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "stream".to_string());
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        StreamManifest::parse(&text, &stem, base)
    }

    /// Parse JSONL text. `default_stream_id` is used when there is no header line.
    pub fn parse(text: &str, default_stream_id: &str, base_dir: PathBuf) -> Result<Self> {
        let mut manifest = StreamManifest::new(default_stream_id, DEFAULT_FPS);
        manifest.base_dir = base_dir;
        let mut seen_entry = false;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(trimmed).map_err(|e| Error::ManifestParse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let is_entry = value.get("frame_index").is_some();
            if !is_entry && !seen_entry {
                let header: ManifestHeader =
                    serde_json::from_value(value).map_err(|e| Error::ManifestParse {
                        line: line_no,
                        message: format!("header: {e}"),
                    })?;
                manifest.stream_id = header.stream_id;
                manifest.fps = header.fps;
                manifest.start_ms = header.start_ms;
                seen_entry = true;
                continue;
            }
            seen_entry = true;
            let entry: ManifestEntry =
                serde_json::from_value(value).map_err(|e| Error::ManifestParse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            manifest.entries.push(entry);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            stream_id: self.stream_id.clone(),
            fps: self.fps,
            start_ms: self.start_ms,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn timestamp_for(&self, entry: &ManifestEntry) -> i64 {
        entry
            .timestamp_ms
            .unwrap_or_else(|| auto_timestamp(self.start_ms, entry.frame_index, self.fps))
    }

    /// Check ordering, fps and annotation invariants. Image bounds are checked
    /// when frames are decoded.
    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        let mut prev: Option<(u64, i64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let ts = self.timestamp_for(e);
            if let Some((pi, pts)) = prev {
                if e.frame_index <= pi {
                    return Err(Error::Stream {
                        entry: i,
                        message: format!(
                            "frame_index {} does not increase (previous {pi})",
                            e.frame_index
                        ),
                    });
                }
                if ts < pts {
                    return Err(Error::Stream {
                        entry: i,
                        message: format!("timestamp {ts} decreases (previous {pts})"),
                    });
                }
            }
            for a in &e.annotations {
                a.validate(None)
                    .map_err(|message| Error::Stream { entry: i, message })?;
            }
            prev = Some((e.frame_index, ts));
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// `start + round(index * 1000 / fps)`.
pub fn auto_timestamp(start_ms: i64, frame_index: u64, fps: f64) -> i64 {
    start_ms + (frame_index as f64 * 1000.0 / fps).round() as i64
}

/// Open a manifest for reading every frame.
pub fn open_stream(manifest: &StreamManifest) -> Result<FrameStream<'_>> {
    FrameStream::new(manifest, 1)
}

/// Iterator over the frames of a manifest, optionally keeping only every
/// `stride`-th entry.
#[derive(Debug)]
pub struct FrameStream<'a> {
    manifest: &'a StreamManifest,
    position: usize,
    stride: usize,
}

impl<'a> FrameStream<'a> {
    pub fn new(manifest: &'a StreamManifest, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("sampling stride must be at least 1".into()));
        }
        manifest.validate()?;
        for (i, e) in manifest.entries.iter().enumerate() {
            if let Some(p) = &e.image_path {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    return Err(Error::Stream {
                        entry: i,
                        message: format!("image file {} does not exist", full.display()),
                    });
                }
            }
        }
        Ok(FrameStream {
            manifest,
            position: 0,
            stride,
        })
    }

    fn decode(&self, entry_idx: usize) -> Result<FrameRecord> {
        let m = self.manifest;
        let e = &m.entries[entry_idx];
        let image = match &e.image_path {
            Some(p) => {
                let full = m.resolve(p);
                let img = Image::load(&full).map_err(|err| Error::Stream {
                    entry: entry_idx,
                    message: format!("cannot decode {}: {err}", full.display()),
                })?;
                Some(img)
            }
            None => None,
        };
        for a in &e.annotations {
            a.validate(image.as_ref()).map_err(|message| Error::Stream {
                entry: entry_idx,
                message,
            })?;
        }
        Ok(FrameRecord {
            stream_id: m.stream_id.clone(),
            frame_index: e.frame_index,
            timestamp_ms: m.timestamp_for(e),
            image,
            annotations: e.annotations.clone(),
        })
    }
}

impl Iterator for FrameStream<'_> {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.position >= self.manifest.entries.len() {
            return None;
        }
        let idx = self.position;
        self.position += self.stride;
        Some(self.decode(idx))
    }
}

/// Per-subject stochastic model of the true risk over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskProcess {
    Constant { value: f64 },
    /// i.i.d. Beta(a, b) draws.
    Beta { a: f64, b: f64 },
    /// `before` until `at_ms` (exclusive), `after` from then on.
    Step {
        before: Box<RiskProcess>,
        after: Box<RiskProcess>,
        at_ms: i64,
    },
}

impl RiskProcess {
    pub fn validate(&self) -> Result<()> {
        match self {
            RiskProcess::Constant { value } => {
                if !(0.0..=1.0).contains(value) {
                    return Err(Error::Config(format!("constant risk {value} outside [0, 1]")));
                }
            }
            RiskProcess::Beta { a, b } => {
                if !(a.is_finite() && b.is_finite() && *a > 0.0 && *b > 0.0) {
                    return Err(Error::Config(format!("invalid Beta({a}, {b})")));
                }
            }
            RiskProcess::Step { before, after, .. } => {
                before.validate()?;
                after.validate()?;
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, t_ms: i64, rng: &mut R) -> f64 {
        match self {
            RiskProcess::Constant { value } => *value,
            RiskProcess::Beta { a, b } => {
                // parameters are checked in validate()
                Beta::new(*a, *b).expect("valid beta parameters").sample(rng)
            }
            RiskProcess::Step {
                before,
                after,
                at_ms,
            } => {
                if t_ms < *at_ms {
                    before.sample(t_ms, rng)
                } else {
                    after.sample(t_ms, rng)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSubject {
    pub label: String,
    pub process: RiskProcess,
    /// Probability that the subject is in view on a given frame.
    #[serde(default = "one")]
    pub visibility: f64,
    /// Identity embedding; drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    /// Whether scenario tooling should enroll this subject in the registry.
    #[serde(default = "yes")]
    pub enrolled: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_stream_id")]
    pub stream_id: String,
    pub subjects: Vec<SynthSubject>,
    pub duration_s: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub seed: u64,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Std-dev of per-frame Gaussian jitter added to identity embeddings
    /// before renormalization.
    #[serde(default = "default_jitter")]
    pub embedding_jitter: f64,
    #[serde(default)]
    pub start_ms: i64,
}

fn default_stream_id() -> String {
    "synthetic".to_string()
}

fn default_dimension() -> usize {
    16
}

fn default_jitter() -> f64 {
    0.02
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Config("synthetic stream needs at least one subject".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Config(format!("duration_s must be positive, got {}", self.duration_s)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !(self.embedding_jitter >= 0.0 && self.embedding_jitter.is_finite()) {
            return Err(Error::Config("embedding_jitter must be non-negative".into()));
        }
        for s in &self.subjects {
            s.process.validate()?;
            if !(0.0..=1.0).contains(&s.visibility) {
                return Err(Error::Config(format!("visibility of {} outside [0, 1]", s.label)));
            }
            if let Some(e) = &s.embedding {
                if e.len() != self.dimension {
                    return Err(Error::DimensionMismatch {
                        expected: self.dimension,
                        actual: e.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The unit-norm identity vector of each subject, in subject order.
    pub fn identity_embeddings(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(self.seed, "identities"));
        let mut out = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            // draw unconditionally so explicit embeddings don't shift later subjects
            let drawn = random_unit(&mut rng, self.dimension);
            let v = match &s.embedding {
                Some(e) => normalize(e).ok_or_else(|| {
                    Error::Config(format!("embedding of {} has zero norm", s.label))
                })?,
                None => drawn,
            };
            out.push((s.label.clone(), v));
        }
        Ok(out)
    }
}

pub(crate) fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(n) = normalize(&v) {
            return n;
        }
    }
}

pub(crate) fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

/// Generate an embedding-only manifest whose annotations carry identity
/// embeddings and true risks drawn from each subject's process.
pub fn synth_stream(spec: &SynthSpec) -> Result<StreamManifest> {
    let identities = spec.identity_embeddings()?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(spec.seed, "frames"));
    let frames = (spec.duration_s * spec.fps).round() as u64;
    let mut manifest = StreamManifest::new(spec.stream_id.clone(), spec.fps);
    manifest.start_ms = spec.start_ms;
    manifest.entries.reserve(frames as usize);

    for frame_index in 0..frames {
        let ts = auto_timestamp(spec.start_ms, frame_index, spec.fps);
        let mut annotations = Vec::new();
        for (slot, (subject, (label, identity))) in
            spec.subjects.iter().zip(identities.iter()).enumerate()
        {
            let visible = subject.visibility >= 1.0 || rng.gen::<f64>() < subject.visibility;
            if !visible {
                continue;
            }
            let risk = subject.process.sample(ts, &mut rng);
            let embedding = if spec.embedding_jitter > 0.0 {
                let jittered: Vec<f64> = identity
                    .iter()
                    .map(|x| x + spec.embedding_jitter * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                normalize(&jittered).unwrap_or_else(|| identity.clone())
            } else {
                identity.clone()
            };
            annotations.push(FaceAnnotation {
                face_box: FaceBox {
                    x: 16 + 96 * slot as u32,
                    y: 16,
                    w: 64,
                    h: 64,
                    confidence: 1.0,
                },
                identity_label: Some(label.clone()),
                embedding: Some(embedding),
                true_risk: Some(risk),
            });
        }
        manifest.entries.push(ManifestEntry {
            frame_index,
            timestamp_ms: Some(ts),
            image_path: None,
            annotations,
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta_subject(label: &str, a: f64, b: f64) -> SynthSubject {
        SynthSubject {
            label: label.into(),
            process: RiskProcess::Beta { a, b },
            visibility: 1.0,
            embedding: None,
            enrolled: true,
        }
    }

    fn spec(subjects: Vec<SynthSubject>, duration_s: f64, fps: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            stream_id: "s".into(),
            subjects,
            duration_s,
            fps,
            seed,
            dimension: 16,
            embedding_jitter: 0.02,
            start_ms: 0,
        }
    }

    #[test]
    fn empty_manifest_yields_nothing() {
        let m = StreamManifest::parse("", "empty", PathBuf::new()).unwrap();
        assert_eq!(open_stream(&m).unwrap().count(), 0);
    }

    #[test]
    fn entries_come_back_in_order() {
        let text = "{\"frame_index\":0}\n{\"frame_index\":1}\n{\"frame_index\":2}\n";
        let m = StreamManifest::parse(text, "s", PathBuf::new()).unwrap();
        let idx: Vec<u64> = open_stream(&m)
            .unwrap()
            .map(|f| f.unwrap().frame_index)
            .collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn autofilled_timestamps_are_33_or_34_apart() {
        let mut text = String::from("{\"stream_id\":\"cam\",\"fps\":30}\n");
        for i in 0..300 {
            text.push_str(&format!("{{\"frame_index\":{i}}}\n"));
        }
        let m = StreamManifest::parse(&text, "x", PathBuf::new()).unwrap();
        assert_eq!(m.stream_id, "cam");
        let ts: Vec<i64> = open_stream(&m)
            .unwrap()
            .map(|f| f.unwrap().timestamp_ms)
            .collect();
        for w in ts.windows(2) {
            let d = w[1] - w[0];
            assert!(d == 33 || d == 34, "spacing {d}");
        }
        // 300 frames at 30 fps span 10 s minus one frame period
        assert_eq!(ts[299], (299.0_f64 * 1000.0 / 30.0).round() as i64);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"frame_index\":0}\n{not json\n";
        match StreamManifest::parse(text, "s", PathBuf::new()) {
            Err(Error::ManifestParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_increasing_index_is_rejected() {
        let text = "{\"frame_index\":3}\n{\"frame_index\":3}\n";
        assert!(matches!(
            StreamManifest::parse(text, "s", PathBuf::new()),
            Err(Error::Stream { entry: 1, .. })
        ));
    }

    #[test]
    fn missing_image_identifies_entry() {
        let text = "{\"frame_index\":0}\n{\"frame_index\":1,\"image_path\":\"nope.png\"}\n";
        let m = StreamManifest::parse(text, "s", PathBuf::from("/nonexistent")).unwrap();
        match open_stream(&m) {
            Err(Error::Stream { entry, .. }) => assert_eq!(entry, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stride_keeps_every_nth_entry() {
        let mut m = StreamManifest::new("s", 30.0);
        for i in 0..10 {
            m.entries.push(ManifestEntry {
                frame_index: i,
                timestamp_ms: None,
                image_path: None,
                annotations: vec![],
            });
        }
        let idx: Vec<u64> = FrameStream::new(&m, 3)
            .unwrap()
            .map(|f| f.unwrap().frame_index)
            .collect();
        assert_eq!(idx, vec![0, 3, 6, 9]);
    }

    #[test]
    fn synth_frame_count() {
        let m = synth_stream(&spec(vec![beta_subject("A", 2.0, 5.0)], 1.0, 10.0, 1)).unwrap();
        assert_eq!(m.entries.len(), 10);
        assert!(m.entries.iter().all(|e| e.annotations.len() == 1));
    }

    #[test]
    fn constant_process_is_constant() {
        let mut s = beta_subject("A", 1.0, 1.0);
        s.process = RiskProcess::Constant { value: 0.5 };
        let m = synth_stream(&spec(vec![s], 2.0, 10.0, 3)).unwrap();
        for e in &m.entries {
            assert_eq!(e.annotations[0].true_risk, Some(0.5));
        }
    }

    #[test]
    fn beta_process_mean_matches_closed_form() {
        // 10,000 frames of Beta(2,5); mean a/(a+b) = 2/7
        let m = synth_stream(&spec(vec![beta_subject("A", 2.0, 5.0)], 1000.0, 10.0, 42)).unwrap();
        let vals: Vec<f64> = m
            .entries
            .iter()
            .map(|e| e.annotations[0].true_risk.unwrap())
            .collect();
        assert_eq!(vals.len(), 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 2.0 / 7.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn synth_is_reproducible_and_seed_sensitive() {
        let a = synth_stream(&spec(vec![beta_subject("A", 2.0, 5.0)], 5.0, 10.0, 9)).unwrap();
        let b = synth_stream(&spec(vec![beta_subject("A", 2.0, 5.0)], 5.0, 10.0, 9)).unwrap();
        let c = synth_stream(&spec(vec![beta_subject("A", 2.0, 5.0)], 5.0, 10.0, 10)).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let risks = |m: &StreamManifest| -> Vec<f64> {
            m.entries.iter().map(|e| e.annotations[0].true_risk.unwrap()).collect()
        };
        assert_ne!(risks(&a), risks(&c));
    }

    #[test]
    fn empty_subject_list_is_a_config_error() {
        assert!(matches!(synth_stream(&spec(vec![], 1.0, 10.0, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn step_process_switches_at_boundary() {
        let p = RiskProcess::Step {
            before: Box::new(RiskProcess::Constant { value: 0.2 }),
            after: Box::new(RiskProcess::Constant { value: 0.7 }),
            at_ms: 1000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.sample(999, &mut rng), 0.2);
        assert_eq!(p.sample(1000, &mut rng), 0.7);
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let m = synth_stream(&spec(vec![beta_subject("A", 2.0, 5.0)], 1.0, 30.0, 5)).unwrap();
        let text = m.to_jsonl().unwrap();
        let back = StreamManifest::parse(&text, "other", PathBuf::from(".")).unwrap();
        assert_eq!(back.stream_id, m.stream_id);
        assert_eq!(back.entries, m.entries);
        let a: Vec<_> = open_stream(&m).unwrap().map(|r| r.unwrap()).collect();
        let b: Vec<_> = open_stream(&back).unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_extracts_the_box() {
        let mut data = Vec::new();
        for y in 0..4u8 {
            for x in 0..4u8 {
                data.extend_from_slice(&[y, x, 0]);
            }
        }
        let img = Image::new(4, 4, data).unwrap();
        let c = img
            .crop(&FaceBox {
                x: 1,
                y: 2,
                w: 2,
                h: 2,
                confidence: 1.0,
            })
            .unwrap();
        assert_eq!(c.pixel(0, 0), [2, 1, 0]);
        assert_eq!(c.pixel(1, 1), [3, 2, 0]);
    }
}
