//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use common::{context_fixture, step, subject, synth_spec, MockServer, Reply};
use digitalshadow::agent::{classify_level, generate_report, Generator, LlmEndpoint, RiskLevel, Thresholds};
use digitalshadow::analytics::{
    change_test, kl_divergence, simulate_cohort, stability_curve, ChangeTestConfig, CohortSpec, Direction,
    WindowSpec,
};
use digitalshadow::identity::{FaceEmbedding, FaceRegistry};
use digitalshadow::numerics::check::{run_suite, SuiteReport};
use digitalshadow::pipeline::{prepare_synthetic, run_pipeline, PipelineConfig};
use digitalshadow::scoring::{metrics, roc_auc, ConfusionCounts, ScorerHandle};
use digitalshadow::stream::{RiskProcess, StreamManifest};

const SEED: u64 = 42;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn rng(key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(digitalshadow::derive_seed(SEED, key))
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

// 1

/// Exhaustive scan: every template of every label, smallest distance wins,
/// equal distances go to the lexicographically smallest label.
fn scan_oracle(entries: &[(String, Vec<f64>)], probe: &[f64], tau: f64) -> (String, f64, bool) {
    let mut best: Option<(&str, f64)> = None;
    for (label, t) in entries {
        let d = t
            .iter()
            .zip(probe)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        best = match best {
            None => Some((label, d)),
            Some((bl, bd)) if d < bd || (d == bd && label.as_str() < bl) => Some((label, d)),
            keep => keep,
        };
    }
    let (l, d) = best.unwrap();
    (l.to_string(), d, d <= tau)
}

fn identity_matching() -> Outcome {
    let mut rng = rng("identity");
    let d = 16;
    let (mut agree, mut total) = (0, 0);
    let mut elapsed = Duration::ZERO;
    for _ in 0..1000 {
        let ids = rng.gen_range(1..=100);
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        let mut reg = FaceRegistry::new(d);
        for i in 0..ids {
            let label = format!("p{:03}", rng.gen_range(0..1000) ^ i);
            for _ in 0..rng.gen_range(1..=3) {
                // occasionally reuse a template under another label to force ties
                let t = if !entries.is_empty() && rng.gen_bool(0.05) {
                    entries[rng.gen_range(0..entries.len())].1.clone()
                } else {
                    unit(&mut rng, d)
                };
                reg.register_face(&FaceEmbedding::new(t.clone()), &label).unwrap();
                entries.push((label.clone(), t));
            }
        }
        for _ in 0..5 {
            let probe = match rng.gen_range(0..3) {
                0 => unit(&mut rng, d),
                1 => entries[rng.gen_range(0..entries.len())].1.clone(),
                _ => {
                    let base = &entries[rng.gen_range(0..entries.len())].1;
                    let noisy: Vec<f64> = base
                        .iter()
                        .map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let n = noisy.iter().map(|x| x * x).sum::<f64>().sqrt();
                    noisy.into_iter().map(|x| x / n).collect()
                }
            };
            let tau = rng.gen_range(0.0..2.0);
            let start = Instant::now();
            let got = reg.match_identity(&FaceEmbedding::new(probe.clone()), tau).unwrap().unwrap();
            elapsed += start.elapsed();
            let (label, dist, accepted) = scan_oracle(&entries, &probe, tau);
            total += 1;
            if got.label == label && got.distance == dist && got.accepted == accepted {
                agree += 1;
            }
        }
    }
    Outcome::new(
        agree == total && elapsed < Duration::from_secs(5),
        format!("{agree}/{total} probes over 1000 registries equal the exhaustive scan; matching took {elapsed:.2?}"),
    )
}

// 2

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

fn scoring_metrics() -> Outcome {
    let mut rng = rng("auc");
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < 100 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..=50);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
            continue;
        }
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.gen_range(0..levels)) / f64::from(levels))
            .collect();
        worst = worst.max((roc_auc(&scores, &labels).unwrap() - pair_count_auc(&scores, &labels)).abs());
        instances += 1;
    }

    let c = |tp, tn, fp, fn_| ConfusionCounts { tp, tn, fp, fn_ };
    let m = metrics(&c(1, 1, 1, 1)).unwrap();
    let balanced = (m.accuracy, m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5, 0.5);
    // recall counts false negatives: 2 / (2 + 2), not 2 / (2 + 6)
    let m = metrics(&c(2, 6, 0, 2)).unwrap();
    let skewed = m.accuracy == 0.8 && m.precision == 1.0 && m.recall == 0.5 && m.f1 == 2.0 / 3.0;
    let m = metrics(&c(0, 3, 0, 1)).unwrap();
    let degenerate = m.precision == 0.0 && m.degenerate.precision && m.recall == 0.0 && m.f1 == 0.0 && m.degenerate.f1;
    Outcome::new(
        worst <= 1e-9 && balanced && skewed && degenerate,
        format!(
            "100 instances, max |auc - pair count| {worst:.1e}; fixtures balanced={balanced} skewed={skewed} degenerate={degenerate}"
        ),
    )
}

// 3

fn kl() -> Outcome {
    let mut rng = rng("kl");
    let hist = |rng: &mut ChaCha8Rng| {
        let bins = rng.gen_range(2..=50);
        let v: Vec<f64> = (0..bins)
            .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() })
            .collect();
        let s: f64 = v.iter().sum();
        if s == 0.0 {
            let mut u = vec![0.0; bins];
            u[0] = 1.0;
            u
        } else {
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        }
    };
    let mut self_zero = 0;
    let mut non_negative = 0;
    for _ in 0..1000 {
        let p = hist(&mut rng);
        if kl_divergence(&p, &p, 1e-6).unwrap() == 0.0 {
            self_zero += 1;
        }
        let mut q = hist(&mut rng);
        q.resize(p.len(), 0.0);
        let s: f64 = q.iter().sum();
        if s == 0.0 {
            q[0] = 1.0;
        } else {
            q.iter_mut().for_each(|x| *x /= s);
        }
        if kl_divergence(&p, &q, 1e-6).unwrap() >= 0.0 {
            non_negative += 1;
        }
    }
    let fixture = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap();
    let err = (fixture - std::f64::consts::LN_2).abs();
    Outcome::new(
        self_zero == 1000 && non_negative == 1000 && err <= 1e-12,
        format!("D(P,P)=0 {self_zero}/1000, D>=0 {non_negative}/1000, |D([1,0],[.5,.5]) - ln 2| = {err:.1e}"),
    )
}

// 4

fn variance_shrinks() -> Outcome {
    let start = Instant::now();
    let curve = stability_curve(&RiskProcess::Beta { a: 2.0, b: 5.0 }, &[1, 5, 25, 125], 100, SEED).unwrap();
    let took = start.elapsed();
    let v: Vec<f64> = curve.iter().map(|p| p.variance).collect();
    let decreasing = v.windows(2).all(|w| w[1] < w[0]);
    let ratio = v[3] / v[0];
    Outcome::new(
        decreasing && ratio < 0.05 && took < Duration::from_secs(10),
        format!(
            "variances {:.3e} {:.3e} {:.3e} {:.3e}; var(125)/var(1) = {ratio:.4}; {took:.2?}",
            v[0], v[1], v[2], v[3]
        ),
    )
}

// 5

fn patient_level_auc_gain() -> Outcome {
    let spec = CohortSpec::default();
    let mut wins = 0;
    let mut gains = Vec::new();
    for trial in 0..100 {
        let c = simulate_cohort(&spec, digitalshadow::derive_seed(SEED, &format!("cohort-{trial}"))).unwrap();
        let image = roc_auc(&c.image_scores, &c.image_labels).unwrap();
        let patient = roc_auc(&c.subject_scores, &c.subject_labels).unwrap();
        gains.push(patient - image);
        if patient - image >= 0.03 {
            wins += 1;
        }
    }
    gains.sort_by(f64::total_cmp);
    Outcome::new(
        wins >= 90,
        format!(
            "{wins}/100 trials with patient AUC >= image AUC + 0.03 (gain min {:.3}, median {:.3})",
            gains[0], gains[50]
        ),
    )
}

// 6

fn change_detection() -> Outcome {
    let mut rng = rng("change");
    let low = Beta::new(2.0, 5.0).unwrap();
    let high = Beta::new(5.0, 2.0).unwrap();
    let cfg = ChangeTestConfig {
        alpha: 0.01,
        ..ChangeTestConfig::default()
    };
    let (mut up, mut still) = (0, 0);
    let mut worst_p = 0.0f64;
    for _ in 0..100 {
        let prev: Vec<f64> = (0..200).map(|_| low.sample(&mut rng)).collect();
        let cur: Vec<f64> = (0..200).map(|_| high.sample(&mut rng)).collect();
        let v = change_test(&prev, &cur, &cfg).unwrap();
        worst_p = worst_p.max(v.p_value);
        if v.direction == Direction::Up && v.p_value < 1e-3 {
            up += 1;
        }
        if change_test(&prev, &prev.clone(), &cfg).unwrap().direction == Direction::None {
            still += 1;
        }
    }
    Outcome::new(
        up >= 99 && still == 100,
        format!("shift flagged up with p < 1e-3 in {up}/100 (max p {worst_p:.1e}); identical windows none in {still}/100"),
    )
}

// 7, 8

fn suite_subset(report: &SuiteReport, names: &[&str]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in names {
        let c = report
            .checks
            .iter()
            .find(|c| c.name == *name)
            .unwrap_or_else(|| panic!("suite has no check {name}"));
        passed &= c.passed;
        parts.push(format!("{} {}/{}", c.name, c.successes, c.trials));
    }
    Outcome::new(passed, parts.join(", "))
}

// 9

fn pipeline_config(spec: &digitalshadow::stream::SynthSpec, dir: &Path, window_ms: i64) -> PipelineConfig {
    let (m, r) = prepare_synthetic(spec, &dir.join("input")).unwrap();
    let mut cfg = PipelineConfig::new(m, r, ScorerHandle::oracle_noise(0.05, 0), dir.join("out"));
    cfg.seed = spec.seed;
    cfg.window = WindowSpec {
        duration_ms: window_ms,
        max_samples: 1_000_000,
    };
    cfg
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();

    let spec = synth_spec(
        vec![
            subject("A", RiskProcess::Beta { a: 2.0, b: 5.0 }, true),
            subject("B", RiskProcess::Beta { a: 5.0, b: 2.0 }, true),
        ],
        20.0,
        10.0,
        SEED,
    );
    let one = pipeline_config(&spec, &dir.path().join("det1"), 5_000);
    let two = pipeline_config(&spec, &dir.path().join("det2"), 5_000);
    run_pipeline(&one).unwrap();
    run_pipeline(&two).unwrap();
    let (f1, f2) = (files(&one.output_root), files(&two.output_root));
    let deterministic = !f1.is_empty() && f1 == f2;

    let spec = synth_spec(
        vec![
            subject("A", RiskProcess::Beta { a: 2.0, b: 5.0 }, true),
            subject("B", RiskProcess::Beta { a: 2.0, b: 5.0 }, false),
        ],
        20.0,
        10.0,
        SEED,
    );
    let cfg = pipeline_config(&spec, &dir.path().join("bystander"), 5_000);
    let summary = run_pipeline(&cfg).unwrap();
    let manifest = StreamManifest::load(&cfg.manifest).unwrap();
    let a_frames = manifest
        .entries
        .iter()
        .filter(|e| e.annotations.iter().any(|a| a.identity_label.as_deref() == Some("A")))
        .count() as u64;
    let db = digitalshadow::records::RecordsDb::open(&cfg.output_root).unwrap();
    let b_samples = db.samples("B").len();
    let filtered = b_samples == 0 && summary.samples_stored == a_frames && db.samples("A").len() as u64 == a_frames;

    let t = 10_000;
    let spec = synth_spec(vec![subject("A", step(0.2, 0.7, t), true)], 30.0, 10.0, SEED);
    let cfg = pipeline_config(&spec, &dir.path().join("step"), t);
    let summary = run_pipeline(&cfg).unwrap();
    let first_post = summary.windows.iter().find(|w| w.t_start >= t);
    let step_ok = first_post.is_some_and(|w| w.t_start == t && w.direction == Direction::Up && w.p_value < 0.01);

    Outcome::new(
        deterministic && filtered && step_ok,
        format!(
            "byte-identical runs={deterministic} ({} files); unregistered samples={b_samples}, registered {}/{a_frames}; first post-change window {}",
            f1.len(),
            summary.samples_stored.min(a_frames),
            first_post.map_or("missing".to_string(), |w| format!("{} p={:.1e}", w.direction, w.p_value))
        ),
    )
}

// 10

/// The level rule written out as a table.
fn rule_oracle(p: f64, d: Direction, t: &Thresholds) -> RiskLevel {
    match d {
        Direction::Up if p >= t.low => RiskLevel::High,
        Direction::Up => RiskLevel::Moderate,
        _ if p >= t.high => RiskLevel::High,
        _ if p < t.low => RiskLevel::Low,
        _ => RiskLevel::Moderate,
    }
}

fn agent() -> Outcome {
    let template = generate_report(&context_fixture(0.3, 0.2), None, 1);
    let template_ok = template.generator == Generator::Template && template.level == RiskLevel::Low;

    let ctx = context_fixture(0.55, 0.8);
    let server = MockServer::start(vec![Reply::completion("narrative from the model")]);
    let mut ep = LlmEndpoint::new(server.url.clone(), "mock");
    ep.backoff_base_ms = 5;
    let llm = generate_report(&ctx, Some(&ep), 1);
    let llm_ok = llm.generator == Generator::Llm && llm.narrative == "narrative from the model" && llm.level == RiskLevel::High;

    let server = MockServer::start(vec![Reply::Status(503, "{}".into())]);
    let mut ep = LlmEndpoint::new(server.url.clone(), "mock");
    ep.backoff_base_ms = 5;
    ep.max_retries = 2;
    let fallback = generate_report(&ctx, Some(&ep), 1);
    let fallback_ok = fallback.generator == Generator::Template
        && fallback.level == RiskLevel::High
        && fallback.provenance.iter().any(|p| p.field == "degraded_mode")
        && server.requests().len() == 3;

    let th = Thresholds::default();
    let (mut grid_ok, mut grid) = (0, 0);
    for i in 0..=10 {
        let p = f64::from(i) / 10.0;
        for d in [Direction::Up, Direction::Down, Direction::None] {
            let mut c = context_fixture(0.3, 0.5);
            c.patient_level = p;
            c.verdict.direction = d;
            let r = generate_report(&c, None, 1);
            grid += 1;
            if r.level == classify_level(p, d, &th) && r.level == rule_oracle(p, d, &th) {
                grid_ok += 1;
            }
        }
    }
    Outcome::new(
        template_ok && llm_ok && fallback_ok && grid_ok == grid,
        format!("template={template_ok} llm={llm_ok} fallback={fallback_ok}; grid {grid_ok}/{grid}"),
    )
}

// 11

fn throughput() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = synth_spec(
        vec![
            subject("A", RiskProcess::Beta { a: 2.0, b: 5.0 }, true),
            subject("B", RiskProcess::Beta { a: 5.0, b: 2.0 }, true),
            subject("C", RiskProcess::Constant { value: 0.5 }, false),
        ],
        60.0,
        30.0,
        SEED,
    );
    let cfg = pipeline_config(&spec, dir.path(), 10_000);
    let start = Instant::now();
    let s = run_pipeline(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let fps = s.frames_processed as f64 / secs;
    Outcome::new(
        fps >= 30.0 && s.frames_failed == 0,
        format!("{} frames in {secs:.3} s = {fps:.0} frames/s", s.frames_processed),
    )
}

fn main() {
    let started = Instant::now();
    let suite = std::sync::OnceLock::new();
    let suite = |f: &dyn Fn(&SuiteReport) -> Outcome| f(suite.get_or_init(|| run_suite(SEED).expect("suite runs")));

    let criteria: Vec<Criterion> = vec![
        ("identity matching equals exhaustive scan", Box::new(identity_matching)),
        ("ROC-AUC and confusion metrics", Box::new(scoring_metrics)),
        ("KL divergence", Box::new(kl)),
        ("window-mean variance shrinks", Box::new(variance_shrinks)),
        ("patient-level AUC gain", Box::new(patient_level_auc_gain)),
        ("change detection", Box::new(change_detection)),
        (
            "numerics oracle suite",
            Box::new(|| {
                suite(&|r| {
                    suite_subset(
                        r,
                        &[
                            "quantize_brute_force",
                            "vqkd_gradients",
                            "mim_gradients",
                            "stop_gradient_probes",
                            "mim_uniform_logits",
                            "descent_200_steps",
                        ],
                    )
                })
            }),
        ),
        (
            "Grad-CAM",
            Box::new(|| {
                suite(&|r| {
                    suite_subset(
                        r,
                        &[
                            "gradcam_non_negative",
                            "gradcam_relu_kill",
                            "gradcam_planted_feature",
                            "gradcam_occlusion_agreement",
                        ],
                    )
                })
            }),
        ),
        ("pipeline determinism, filtering, step change", Box::new(pipeline)),
        ("agent report paths and level grid", Box::new(agent)),
        ("stub pipeline throughput", Box::new(throughput)),
    ];

    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.passed {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1?})",
        criteria.len() - failed,
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
