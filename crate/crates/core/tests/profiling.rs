mod common;

use std::path::Path;

use common::{subject, synth_spec};
use digitalshadow::analytics::WindowSpec;
use digitalshadow::pipeline::{prepare_synthetic, PipelineConfig};
use digitalshadow::profiling::{profile, ProfileReport, Stage, WARM_UP_FRAMES};
use digitalshadow::scoring::ScorerHandle;
use digitalshadow::stream::RiskProcess;

fn profiled(dir: &Path, frames: usize, repeats: usize) -> ProfileReport {
    let spec = synth_spec(
        vec![subject("A", RiskProcess::Beta { a: 2.0, b: 5.0 }, true)],
        frames as f64 / 10.0,
        10.0,
        3,
    );
    let (m, r) = prepare_synthetic(&spec, &dir.join("input")).unwrap();
    let mut cfg = PipelineConfig::new(m, r, ScorerHandle::oracle_noise(0.05, 0), dir.join("out"));
    cfg.window = WindowSpec {
        duration_ms: 5_000,
        max_samples: 10_000,
    };
    profile(&cfg, repeats).unwrap()
}

#[test]
fn counts_exclude_warm_up_and_order_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let report = profiled(dir.path(), 100, 10);
    assert_eq!(report.frames, 100);
    let stages: Vec<Stage> = report.stages.iter().map(|s| s.stage).collect();
    assert_eq!(stages, Stage::ALL.to_vec());
    for s in &report.stages {
        assert_eq!(s.count, 100 - WARM_UP_FRAMES);
        assert!(s.p50_ms <= s.p95_ms && s.p95_ms <= s.max_ms, "{s:?}");
        assert!(s.mean_ms >= 0.0);
    }
    let written: ProfileReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/profile.json")).unwrap()).unwrap();
    assert_eq!(written.stages.len(), 6);
    assert!(!dir.path().join("out/.profile").exists());
}

#[test]
fn persist_time_scales_linearly() {
    let dir = tempfile::tempdir().unwrap();
    let total = |frames: usize| {
        let report = profiled(&dir.path().join(frames.to_string()), frames, 10);
        report
            .stages
            .iter()
            .find(|s| s.stage == Stage::Persist)
            .unwrap()
            .total_ms()
    };
    // median of a few attempts keeps scheduler noise out of the ratio
    let mut ratios: Vec<f64> = (0..3).map(|_| total(800) / total(400)).collect();
    ratios.sort_by(f64::total_cmp);
    let r = ratios[1];
    assert!((2.0 / 1.5..=2.0 * 1.5).contains(&r), "ratio {r} ({ratios:?})");
}
