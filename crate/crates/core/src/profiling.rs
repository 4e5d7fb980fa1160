//! Per-stage latency of the monitoring loop.
//!
//! The manifest is replayed `repeats` times, each run into a scratch output
//! directory. A frame's time in a stage is averaged over the runs, then order
//! statistics are taken over frames. The first [`WARM_UP_FRAMES`] frames of
//! every run are excluded.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Pipeline, PipelineConfig, StageDurations};
use crate::stream::{FrameStream, StreamManifest};

pub const WARM_UP_FRAMES: usize = 5;
pub const MIN_REPEATS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Embed,
    Match,
    Score,
    Persist,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Detect,
        Stage::Embed,
        Stage::Match,
        Stage::Score,
        Stage::Persist,
        Stage::Analyze,
    ];

    fn of(self, d: &StageDurations) -> f64 {
        match self {
            Stage::Detect => d.detect,
            Stage::Embed => d.embed,
            Stage::Match => d.matching,
            Stage::Score => d.score,
            Stage::Persist => d.persist,
            Stage::Analyze => d.analyze,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl StageTiming {
    pub fn from_samples(stage: Stage, samples: &[f64]) -> Self {
        if samples.is_empty() {
            return StageTiming {
                stage,
                count: 0,
                mean_ms: 0.0,
                p50_ms: 0.0,
                p95_ms: 0.0,
                max_ms: 0.0,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        StageTiming {
            stage,
            count: sorted.len(),
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: nearest_rank(&sorted, 0.50),
            p95_ms: nearest_rank(&sorted, 0.95),
            max_ms: sorted[sorted.len() - 1],
        }
    }

    pub fn total_ms(&self) -> f64 {
        self.mean_ms * self.count as f64
    }
}

/// Nearest-rank percentile of sorted data.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub frames: usize,
    pub repeats: usize,
    pub warm_up: usize,
    /// Whole-loop throughput of the fastest run, warm-up included.
    pub frames_per_second: f64,
    pub stages: Vec<StageTiming>,
}

/// Profile the configured pipeline and write `profile.json` under the output root.
pub fn profile(config: &PipelineConfig, repeats: usize) -> Result<ProfileReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("profiling needs at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    config.validate()?;
    let manifest = StreamManifest::load(&config.manifest)?;
    let scratch = config.output_root.join(".profile");
    let mut per_frame: Vec<Vec<StageDurations>> = Vec::new();
    let mut best_fps = 0.0_f64;

    for r in 0..repeats {
        let run_dir = scratch.join(format!("run-{r}"));
        remove_dir(&run_dir)?;
        let mut cfg = config.clone();
        cfg.output_root = run_dir.clone();
        cfg.pipelined = false;
        let durations = run_timed(cfg, &manifest, &mut best_fps)?;
        remove_dir(&run_dir)?;
        if per_frame.is_empty() {
            per_frame = vec![Vec::with_capacity(repeats); durations.len()];
        }
        for (slot, d) in per_frame.iter_mut().zip(durations) {
            slot.push(d);
        }
    }
    remove_dir(&scratch)?;

    let kept = &per_frame[per_frame.len().min(WARM_UP_FRAMES)..];
    let stages = Stage::ALL
        .iter()
        .map(|&stage| {
            let means: Vec<f64> = kept
                .iter()
                .map(|runs| runs.iter().map(|d| stage.of(d)).sum::<f64>() / runs.len() as f64)
                .collect();
            StageTiming::from_samples(stage, &means)
        })
        .collect();
    let report = ProfileReport {
        frames: per_frame.len(),
        repeats,
        warm_up: WARM_UP_FRAMES,
        frames_per_second: best_fps,
        stages,
    };
    fs::create_dir_all(&config.output_root).map_err(|e| Error::io(&config.output_root, e))?;
    let path = config.output_root.join("profile.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn run_timed(cfg: PipelineConfig, manifest: &StreamManifest, best_fps: &mut f64) -> Result<Vec<StageDurations>> {
    let stride = cfg.stride;
    let mut pipeline = Pipeline::new(cfg)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    let start = Instant::now();
    for frame in FrameStream::new(manifest, stride)? {
        let mut d = StageDurations::default();
        // per-frame failures are already counted by the pipeline
        if let Ok(frame) = frame {
            let _ = pipeline.process_frame(&frame, Some(&mut d));
        }
        out.push(d);
    }
    pipeline.finish()?;
    let secs = start.elapsed().as_secs_f64();
    if secs > 0.0 {
        *best_fps = best_fps.max(out.len() as f64 / secs);
    }
    Ok(out)
}

fn remove_dir(path: &Path) -> Result<()> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_on_small_sets() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank(&v, 0.5), 2.0);
        assert_eq!(nearest_rank(&v, 0.95), 4.0);
        assert_eq!(nearest_rank(&[7.0], 0.5), 7.0);
    }

    #[test]
    fn timing_order_statistics() {
        let samples: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let t = StageTiming::from_samples(Stage::Score, &samples);
        assert_eq!(t.count, 100);
        assert_eq!(t.p50_ms, 50.0);
        assert_eq!(t.p95_ms, 95.0);
        assert_eq!(t.max_ms, 100.0);
        assert!((t.mean_ms - 50.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_repeats_rejected() {
        let cfg = PipelineConfig::new(
            "m".into(),
            "r".into(),
            crate::scoring::ScorerHandle::oracle_noise(0.0, 0),
            "out".into(),
        );
        assert!(matches!(profile(&cfg, 3), Err(Error::Config(_))));
    }
}
