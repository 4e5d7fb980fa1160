//! The monitoring loop: frames in, per-subject risk series and window reports out.
//!
//! Per frame: detect → embed → match → score accepted faces → persist. Each
//! persisted sample is fed to the subject's tumbling window; when a window
//! completes it is compared against the one before it and a report is
//! written under `reports/<subject>/<window end>.json`.
//!
//! Faces that match no enrolled identity within τ are counted and dropped.
//! A frame that fails at any stage is counted in `frames_failed` and none of
//! its samples are persisted.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{generate_report, LlmEndpoint, ReportContext, RiskLevel, Thresholds};
use crate::analytics::{
    ChangeTestConfig, ClosedWindow, Direction, RiskSample, TumblingWindows, WindowSpec,
    DEFAULT_ALPHA, DEFAULT_BINS, DEFAULT_KL_EPSILON,
};
use crate::error::{Error, Result};
use crate::identity::{
    detect_faces, embed, DetectorHandle, EmbedderHandle, FaceRegistry, HashProjection, DEFAULT_TAU,
};
use crate::records::{context_from_samples, encode_subject_id, RecordsDb, SubjectProfile};
use crate::scoring::{ScoreRequest, Scorer, ScorerHandle};
use crate::stream::{synth_stream, FrameRecord, FrameStream, StreamManifest, SynthSpec};

/// How face payloads become identity vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    /// Annotation embeddings only.
    #[default]
    Passthrough,
    /// Pixel crops through a seeded random projection.
    HashProjection { seed: u64 },
}

impl EmbedderSpec {
    pub fn handle(&self, dimension: usize) -> EmbedderHandle {
        match *self {
            EmbedderSpec::Passthrough => EmbedderHandle::Passthrough { dimension },
            EmbedderSpec::HashProjection { seed } => {
                EmbedderHandle::HashProjection(HashProjection { dimension, seed })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub registry: PathBuf,
    pub scorer: ScorerHandle,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmEndpoint>,
    pub output_root: PathBuf,
    /// Keep every `stride`-th frame.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    /// Samples between fsyncs of the risk log.
    #[serde(default = "default_store_batch")]
    pub store_batch: usize,
    /// Decode frames on a reader thread while the main thread processes.
    #[serde(default)]
    pub pipelined: bool,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_stride() -> usize {
    1
}

fn default_store_batch() -> usize {
    64
}

/// Frames buffered between the reader thread and the processor.
const CHANNEL_DEPTH: usize = 64;

impl PipelineConfig {
    pub fn new(manifest: PathBuf, registry: PathBuf, scorer: ScorerHandle, output_root: PathBuf) -> Self {
        PipelineConfig {
            manifest,
            registry,
            scorer,
            window: WindowSpec::default(),
            bins: DEFAULT_BINS,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            thresholds: Thresholds::default(),
            llm: None,
            output_root,
            stride: 1,
            seed: 0,
            embedder: EmbedderSpec::default(),
            store_batch: default_store_batch(),
            pipelined: false,
        }
    }

    /// Read a JSON config. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.registry, &mut cfg.output_root] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn change_config(&self) -> ChangeTestConfig {
        ChangeTestConfig {
            alpha: self.alpha,
            bins: self.bins,
            epsilon: DEFAULT_KL_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", self.manifest.display())));
        }
        if !self.registry.is_file() {
            return Err(Error::Config(format!("registry {} does not exist", self.registry.display())));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.store_batch == 0 {
            return Err(Error::Config("store_batch must be at least 1".into()));
        }
        self.window.validate()?;
        self.thresholds.validate()?;
        if let Some(llm) = &self.llm {
            llm.validate()?;
        }
        Ok(())
    }
}

/// Outcome of one completed window for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub subject_id: String,
    pub t_start: i64,
    pub t_end: i64,
    pub count: usize,
    pub mean: f64,
    pub direction: Direction,
    pub p_value: f64,
    pub kl: f64,
    pub level: RiskLevel,
    pub report: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames_processed: u64,
    pub frames_failed: u64,
    pub faces_detected: u64,
    pub faces_matched: u64,
    /// Faces whose nearest identity was farther than τ; never persisted.
    pub faces_discarded: u64,
    pub samples_stored: u64,
    pub verdicts_emitted: u64,
    pub reports_written: u64,
    pub windows: Vec<WindowVerdict>,
}

/// Wall-clock time spent in each stage while processing one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageDurations {
    pub detect: f64,
    pub embed: f64,
    pub matching: f64,
    pub score: f64,
    pub persist: f64,
    pub analyze: f64,
}

struct Stopwatch<'a> {
    sink: Option<&'a mut StageDurations>,
    last: Option<Instant>,
}

impl<'a> Stopwatch<'a> {
    fn new(sink: Option<&'a mut StageDurations>) -> Self {
        let last = sink.as_ref().map(|_| Instant::now());
        Stopwatch { sink, last }
    }

    /// Charge the time since the previous lap to one stage.
    fn lap(&mut self, stage: impl FnOnce(&mut StageDurations) -> &mut f64) {
        if let (Some(sink), Some(last)) = (self.sink.as_deref_mut(), self.last.as_mut()) {
            let now = Instant::now();
            *stage(sink) += now.duration_since(*last).as_secs_f64() * 1e3;
            *last = now;
        }
    }
}

#[derive(Debug)]
struct SubjectState {
    windows: TumblingWindows,
    previous: Option<ClosedWindow>,
}

/// A configured pipeline over one output root.
pub struct Pipeline {
    config: PipelineConfig,
    registry: FaceRegistry,
    detector: DetectorHandle,
    embedder: EmbedderHandle,
    scorer: Option<Scorer>,
    db: RecordsDb,
    subject_of_label: HashMap<String, String>,
    subjects: BTreeMap<String, SubjectState>,
    summary: RunSummary,
    stream_end_ms: Option<i64>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("output_root", &self.config.output_root)
            .field("summary", &self.summary)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let registry = FaceRegistry::load(&config.registry)?;
        let embedder = config.embedder.handle(registry.dimension());
        fs::create_dir_all(&config.output_root).map_err(|e| Error::io(&config.output_root, e))?;
        let db = RecordsDb::open_with_batch(&config.output_root, config.store_batch)?;
        Ok(Pipeline {
            registry,
            detector: DetectorHandle::Annotations,
            embedder,
            scorer: None,
            db,
            subject_of_label: HashMap::new(),
            subjects: BTreeMap::new(),
            summary: RunSummary::default(),
            stream_end_ms: None,
            config,
        })
    }

    pub fn with_detector(mut self, detector: DetectorHandle) -> Self {
        self.detector = detector;
        self
    }

    pub fn with_embedder(mut self, embedder: EmbedderHandle) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn with_scorer(mut self, scorer: Scorer) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn records(&self) -> &RecordsDb {
        &self.db
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    /// Run over the configured manifest and return the summary.
    pub fn run(mut self) -> Result<RunSummary> {
        let manifest = StreamManifest::load(&self.config.manifest)?;
        self.run_manifest(&manifest)?;
        self.finish()
    }

    /// Process every frame of `manifest` (honoring the configured stride).
    pub fn run_manifest(&mut self, manifest: &StreamManifest) -> Result<()> {
        self.ensure_scorer(manifest)?;
        let frames = FrameStream::new(manifest, self.config.stride)?;
        if self.config.pipelined {
            std::thread::scope(|scope| {
                let (tx, rx) = mpsc::sync_channel(CHANNEL_DEPTH);
                scope.spawn(move || {
                    for frame in frames {
                        if tx.send(frame).is_err() {
                            break;
                        }
                    }
                });
                for frame in rx {
                    self.accept(frame, None);
                }
            });
        } else {
            for frame in frames {
                self.accept(frame, None);
            }
        }
        if let Some(last) = manifest.entries.last() {
            let period = (1000.0 / manifest.fps).round() as i64;
            self.stream_end_ms = Some(manifest.timestamp_for(last) + period);
        }
        Ok(())
    }

    fn ensure_scorer(&mut self, manifest: &StreamManifest) -> Result<()> {
        if self.scorer.is_none() {
            let stream_seed = crate::derive_seed(self.config.seed, &manifest.stream_id);
            self.scorer = Some(Scorer::from_handle(&self.config.scorer, stream_seed)?);
        }
        Ok(())
    }

    fn accept(&mut self, frame: Result<FrameRecord>, timings: Option<&mut StageDurations>) {
        match frame {
            Ok(f) => {
                let _ = self.process_frame(&f, timings);
            }
            Err(e) => {
                log::error!("skipping unreadable frame: {e}");
                self.summary.frames_failed += 1;
            }
        }
    }

    /// Process one frame; failures are logged and counted, not propagated
    /// through the run. Returns the samples persisted for the frame.
    pub fn process_frame(
        &mut self,
        frame: &FrameRecord,
        timings: Option<&mut StageDurations>,
    ) -> Result<Vec<RiskSample>> {
        let result = self.try_frame(frame, timings);
        match &result {
            Ok(_) => self.summary.frames_processed += 1,
            Err(e) => {
                log::error!("frame {} of {}: {e}", frame.frame_index, frame.stream_id);
                self.summary.frames_failed += 1;
            }
        }
        result
    }

    fn try_frame(
        &mut self,
        frame: &FrameRecord,
        timings: Option<&mut StageDurations>,
    ) -> Result<Vec<RiskSample>> {
        let mut clock = Stopwatch::new(timings);
        if self.scorer.is_none() {
            let stream_seed = crate::derive_seed(self.config.seed, &frame.stream_id);
            self.scorer = Some(Scorer::from_handle(&self.config.scorer, stream_seed)?);
        }
        let faces = detect_faces(frame, &self.detector)?;
        clock.lap(|d| &mut d.detect);

        // Everything fallible that does not touch disk happens before the
        // first sample is written, so a failed frame persists nothing.
        let mut scored = Vec::with_capacity(faces.len());
        let mut discarded = 0;
        for face in &faces {
            let embedding = embed(&face.payload, &self.embedder)?;
            clock.lap(|d| &mut d.embed);
            let found = self.registry.match_identity(&embedding, self.config.tau)?;
            clock.lap(|d| &mut d.matching);
            let Some(m) = found.filter(|m| m.accepted) else {
                discarded += 1;
                continue;
            };
            let true_risk = frame
                .annotations
                .get(face.annotation_index)
                .and_then(|a| a.true_risk);
            let scorer = self.scorer.as_mut().expect("scorer initialized above");
            let score = scorer.score(&ScoreRequest {
                embedding: &embedding,
                true_risk,
                stream_id: &frame.stream_id,
                frame_index: frame.frame_index,
                label: &m.label,
            })?;
            clock.lap(|d| &mut d.score);
            scored.push((m.label, score.value));
        }

        let mut stored = Vec::with_capacity(scored.len());
        for (label, value) in scored {
            let subject_id = self.subject_for(&label, frame.timestamp_ms)?;
            let sample = RiskSample::new(subject_id, frame.timestamp_ms, value)?;
            self.db.append_sample(sample.clone())?;
            stored.push(sample);
        }
        clock.lap(|d| &mut d.persist);

        for sample in &stored {
            self.observe(sample.clone())?;
        }
        clock.lap(|d| &mut d.analyze);

        self.summary.faces_detected += faces.len() as u64;
        self.summary.faces_discarded += discarded;
        self.summary.faces_matched += stored.len() as u64;
        self.summary.samples_stored += stored.len() as u64;
        Ok(stored)
    }

    /// Subject linked to a registry label; creates a bare profile on first sight.
    fn subject_for(&mut self, label: &str, now_ms: i64) -> Result<String> {
        if let Some(id) = self.subject_of_label.get(label) {
            return Ok(id.clone());
        }
        let id = match self.db.subject_for_label(label)? {
            Some(id) => id,
            None => {
                self.db
                    .upsert_profile(&SubjectProfile::minimal(label, label, now_ms), Some(&self.registry))?;
                label.to_string()
            }
        };
        self.subject_of_label.insert(label.to_string(), id.clone());
        Ok(id)
    }

    fn observe(&mut self, sample: RiskSample) -> Result<()> {
        let spec = self.config.window;
        let subject = sample.subject_id.clone();
        let state = self
            .subjects
            .entry(subject.clone())
            .or_insert_with(|| SubjectState {
                windows: TumblingWindows::new(spec),
                previous: None,
            });
        if let Some(closed) = state.windows.push(sample) {
            self.close_window(&subject, closed)?;
        }
        Ok(())
    }

    fn close_window(&mut self, subject_id: &str, closed: ClosedWindow) -> Result<()> {
        let state = self.subjects.get_mut(subject_id).expect("subject state exists");
        let previous = state
            .previous
            .take()
            .filter(|p| p.t_end == closed.t_start);
        let prev_samples = previous.as_ref().map_or(&[][..], |p| p.samples.as_slice());
        let prev_start = previous
            .as_ref()
            .map_or(closed.t_start - (closed.t_end - closed.t_start), |p| p.t_start);
        let profile = self.db.profile(subject_id)?;
        let inputs = context_from_samples(
            profile,
            prev_samples,
            &closed.samples,
            (prev_start, closed.t_start, closed.t_end),
            &self.config.change_config(),
        )?;
        let ctx = ReportContext::from_inputs(inputs, self.config.thresholds)?;
        let report = generate_report(&ctx, self.config.llm.as_ref(), closed.t_end);
        self.summary.verdicts_emitted += 1;

        let dir = self
            .config
            .output_root
            .join("reports")
            .join(encode_subject_id(subject_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{}.json", closed.t_end));
        fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
        self.summary.reports_written += 1;

        self.summary.windows.push(WindowVerdict {
            subject_id: subject_id.to_string(),
            t_start: closed.t_start,
            t_end: closed.t_end,
            count: ctx.current.count,
            mean: ctx.current.mean,
            direction: ctx.verdict.direction,
            p_value: ctx.verdict.p_value,
            kl: ctx.verdict.kl,
            level: report.level,
            report: path,
        });
        self.subjects
            .get_mut(subject_id)
            .expect("subject state exists")
            .previous = Some(closed);
        Ok(())
    }

    /// Flush the log and close windows that the stream covered in full.
    pub fn finish(mut self) -> Result<RunSummary> {
        self.db.flush()?;
        let ids: Vec<String> = self.subjects.keys().cloned().collect();
        for id in ids {
            let state = self.subjects.get_mut(&id).expect("listed above");
            let Some(mut open) = state.windows.finish() else {
                continue;
            };
            let full_end = open.t_start + self.config.window.duration_ms;
            if self.stream_end_ms.is_some_and(|end| end >= full_end) {
                open.t_end = full_end;
                self.close_window(&id, open)?;
            }
        }
        Ok(self.summary)
    }
}

/// Validate the config and run it.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary> {
    Pipeline::new(config.clone())?.run()
}

/// Write a synthetic manifest and a registry enrolling the subjects marked
/// `enrolled` into `dir`. Returns `(manifest path, registry path)`.
pub fn prepare_synthetic(spec: &SynthSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = synth_stream(spec)?;
    let manifest_path = dir.join("manifest.jsonl");
    manifest.save(&manifest_path)?;
    let mut registry = FaceRegistry::new(spec.dimension);
    for (subject, (label, vector)) in spec.subjects.iter().zip(spec.identity_embeddings()?) {
        if subject.enrolled {
            registry.register_face(&crate::identity::FaceEmbedding::new(vector), &label)?;
        }
    }
    let registry_path = dir.join("registry.json");
    registry.save(&registry_path)?;
    Ok((manifest_path, registry_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{RiskProcess, SynthSubject};

    fn subject(label: &str, process: RiskProcess, enrolled: bool) -> SynthSubject {
        SynthSubject {
            label: label.into(),
            process,
            visibility: 1.0,
            embedding: None,
            enrolled,
        }
    }

    fn setup(dir: &Path, subjects: Vec<SynthSubject>, duration_s: f64) -> PipelineConfig {
        let spec = SynthSpec {
            stream_id: "cam0".into(),
            subjects,
            duration_s,
            fps: 10.0,
            seed: 11,
            dimension: 16,
            embedding_jitter: 0.02,
            start_ms: 0,
        };
        let (m, r) = prepare_synthetic(&spec, &dir.join("input")).unwrap();
        let mut cfg = PipelineConfig::new(m, r, ScorerHandle::oracle_noise(0.05, 3), dir.join("out"));
        cfg.window = WindowSpec {
            duration_ms: 2_000,
            max_samples: 10_000,
        };
        cfg
    }

    #[test]
    fn empty_manifest_gives_zero_summary() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        StreamManifest::new("empty", 30.0).save(&m).unwrap();
        let r = dir.path().join("r.json");
        FaceRegistry::new(4).save(&r).unwrap();
        let cfg = PipelineConfig::new(m, r, ScorerHandle::oracle_noise(0.0, 0), dir.path().join("out"));
        assert_eq!(run_pipeline(&cfg).unwrap(), RunSummary::default());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::new(
            dir.path().join("nope.jsonl"),
            dir.path().join("nope.json"),
            ScorerHandle::oracle_noise(0.0, 0),
            dir.path().join("out"),
        );
        assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn only_enrolled_subjects_are_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(
            dir.path(),
            vec![
                subject("A", RiskProcess::Constant { value: 0.3 }, true),
                subject("B", RiskProcess::Constant { value: 0.6 }, false),
            ],
            3.0,
        );
        let summary = run_pipeline(&cfg).unwrap();
        assert_eq!(summary.frames_processed, 30);
        assert_eq!(summary.faces_detected, 60);
        assert_eq!(summary.samples_stored, 30);
        assert_eq!(summary.faces_discarded, 30);
        let db = RecordsDb::open(&cfg.output_root).unwrap();
        assert_eq!(db.samples("A").len(), 30);
        assert!(db.samples("B").is_empty());
    }

    #[test]
    fn one_report_per_completed_window() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(
            dir.path(),
            vec![subject("A", RiskProcess::Constant { value: 0.3 }, true)],
            5.0,
        );
        let summary = run_pipeline(&cfg).unwrap();
        // 5 s of frames, 2 s windows: [0,2) and [2,4) complete, [4,5) does not
        let ends: Vec<i64> = summary.windows.iter().map(|w| w.t_end).collect();
        assert_eq!(ends, vec![2_000, 4_000]);
        assert_eq!(summary.reports_written, 2);
        for w in &summary.windows {
            assert!(w.report.is_file());
            assert_eq!(w.count, 20);
        }
    }

    #[test]
    fn stream_covering_last_window_reports_it() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(
            dir.path(),
            vec![subject("A", RiskProcess::Constant { value: 0.3 }, true)],
            4.0,
        );
        let summary = run_pipeline(&cfg).unwrap();
        let ends: Vec<i64> = summary.windows.iter().map(|w| w.t_end).collect();
        assert_eq!(ends, vec![2_000, 4_000]);
    }

    #[test]
    fn pipelined_mode_matches_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = vec![
            subject("A", RiskProcess::Beta { a: 2.0, b: 5.0 }, true),
            subject("B", RiskProcess::Beta { a: 5.0, b: 2.0 }, true),
        ];
        let cfg = setup(&dir.path().join("seq"), subjects.clone(), 6.0);
        let mut par = setup(&dir.path().join("par"), subjects, 6.0);
        par.pipelined = true;
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&par).unwrap();
        assert_eq!(a.samples_stored, b.samples_stored);
        assert_eq!(
            fs::read(cfg.output_root.join("samples.jsonl")).unwrap(),
            fs::read(par.output_root.join("samples.jsonl")).unwrap()
        );
    }

    #[test]
    fn failing_frame_is_counted_and_persists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(
            dir.path(),
            vec![subject("A", RiskProcess::Constant { value: 0.3 }, true)],
            1.0,
        );
        let mut manifest = StreamManifest::load(&cfg.manifest).unwrap();
        // the oracle scorer needs a true risk
        manifest.entries[3].annotations[0].true_risk = None;
        manifest.save(&cfg.manifest).unwrap();
        let summary = run_pipeline(&cfg).unwrap();
        assert_eq!(summary.frames_processed, 9);
        assert_eq!(summary.frames_failed, 1);
        assert_eq!(summary.samples_stored, 9);
    }

    #[test]
    fn config_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"manifest": "m.jsonl", "registry": "/abs/r.json",
                "scorer": {"kind": "oracle_noise", "sigma": 0.1}, "output_root": "out"}"#,
        )
        .unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.manifest, dir.path().join("m.jsonl"));
        assert_eq!(cfg.registry, PathBuf::from("/abs/r.json"));
        assert_eq!(cfg.window, WindowSpec::default());
        assert_eq!(cfg.tau, DEFAULT_TAU);
    }
}
