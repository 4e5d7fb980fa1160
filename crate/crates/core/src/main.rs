use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use digitalshadow::agent::{generate_report, LlmEndpoint, ReportContext, RiskReport, Thresholds};
use digitalshadow::analytics::{ChangeTestConfig, DEFAULT_KL_EPSILON};
use digitalshadow::identity::{FaceEmbedding, FaceRegistry};
use digitalshadow::numerics::check::{run_suite, SuiteReport, DEFAULT_SUITE_SEED};
use digitalshadow::pipeline::{prepare_synthetic, run_pipeline, PipelineConfig, RunSummary};
use digitalshadow::profiling::profile;
use digitalshadow::records::RecordsDb;
use digitalshadow::scoring::{confusion, metrics, roc_auc, ConfusionCounts, Metrics, ScorerHandle};
use digitalshadow::stream::SynthSpec;
use digitalshadow::{Error, Result};

/// Exit status when the run completed but some frames failed.
const EXIT_FRAME_ERRORS: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "digitalshadow", version, about = "Contactless risk monitoring over frame streams")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic stream and registry, then run the pipeline on it.
    Simulate {
        /// Synthetic stream spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output root; inputs are written to <out>/input.
        #[arg(long)]
        out: PathBuf,
        /// Std-dev of the oracle scorer's noise.
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the pipeline described by a config file.
    Monitor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a report for one subject from stored samples.
    Report {
        /// Output root of a previous run.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subject: String,
        /// End of the current window; defaults to just after the last sample.
        #[arg(long)]
        now_ms: Option<i64>,
        #[arg(long, default_value_t = 24 * 60 * 60 * 1000)]
        window_ms: i64,
        #[arg(long, default_value_t = digitalshadow::analytics::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = digitalshadow::analytics::DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        theta_low: Option<f64>,
        #[arg(long)]
        theta_high: Option<f64>,
        #[arg(long, requires = "llm_model")]
        llm_url: Option<String>,
        #[arg(long, requires = "llm_url")]
        llm_model: Option<String>,
    },
    /// Confusion metrics and ROC-AUC over a CSV of `score,truth[,subject_id]`.
    Metrics {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = digitalshadow::scoring::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Per-stage latency of the pipeline.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = digitalshadow::profiling::MIN_REPEATS)]
        repeats: usize,
    },
    /// Run the numerics oracle suite.
    NumericsCheck {
        #[arg(long, default_value_t = DEFAULT_SUITE_SEED)]
        seed: u64,
    },
    /// Manage the identity registry.
    Registry {
        #[command(subcommand)]
        action: RegistryAction,
    },
}

#[derive(Subcommand, Debug)]
enum RegistryAction {
    /// Create an empty registry.
    Init {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        dimension: usize,
    },
    /// Enroll an embedding (normalized on the way in) under a label.
    Add {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        label: String,
        /// Comma-separated components.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        embedding: Vec<f64>,
    },
    List {
        #[arg(long)]
        path: PathBuf,
    },
}

/// Flags that override pipeline config fields.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    window_ms: Option<i64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    theta_low: Option<f64>,
    #[arg(long)]
    theta_high: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    pipelined: bool,
    #[arg(long, requires = "llm_model")]
    llm_url: Option<String>,
    #[arg(long, requires = "llm_url")]
    llm_model: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.window_ms {
            cfg.window.duration_ms = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.bins {
            cfg.bins = v;
        }
        if let Some(v) = self.theta_low {
            cfg.thresholds.low = v;
        }
        if let Some(v) = self.theta_high {
            cfg.thresholds.high = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if self.pipelined {
            cfg.pipelined = true;
        }
        if let (Some(url), Some(model)) = (&self.llm_url, &self.llm_model) {
            cfg.llm = Some(LlmEndpoint::new(url.clone(), model.clone()));
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Simulate {
            spec,
            out,
            sigma,
            overrides,
        } => {
            let spec: SynthSpec = read_json(spec)?;
            let (manifest, registry) = prepare_synthetic(&spec, &out.join("input"))?;
            let mut cfg = PipelineConfig::new(
                manifest,
                registry,
                ScorerHandle::oracle_noise(*sigma, spec.seed),
                out.clone(),
            );
            cfg.seed = spec.seed;
            overrides.apply(&mut cfg);
            let summary = run_pipeline(&cfg)?;
            emit_summary(cli.json, &summary)
        }
        Command::Monitor {
            config,
            manifest,
            registry,
            out,
            overrides,
        } => {
            let mut cfg = PipelineConfig::load(config)?;
            if let Some(m) = manifest {
                cfg.manifest = m.clone();
            }
            if let Some(r) = registry {
                cfg.registry = r.clone();
            }
            if let Some(o) = out {
                cfg.output_root = o.clone();
            }
            overrides.apply(&mut cfg);
            let summary = run_pipeline(&cfg)?;
            emit_summary(cli.json, &summary)
        }
        Command::Report {
            out,
            subject,
            now_ms,
            window_ms,
            alpha,
            bins,
            theta_low,
            theta_high,
            llm_url,
            llm_model,
        } => {
            let mut thresholds = Thresholds::default();
            thresholds.low = theta_low.unwrap_or(thresholds.low);
            thresholds.high = theta_high.unwrap_or(thresholds.high);
            let endpoint = match (llm_url, llm_model) {
                (Some(u), Some(m)) => Some(LlmEndpoint::new(u.clone(), m.clone())),
                _ => None,
            };
            let report = on_demand_report(
                out,
                subject,
                *now_ms,
                *window_ms,
                &ChangeTestConfig {
                    alpha: *alpha,
                    bins: *bins,
                    epsilon: DEFAULT_KL_EPSILON,
                },
                thresholds,
                endpoint.as_ref(),
            )?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render_text());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { scores, threshold } => {
            let out = score_file_metrics(scores, *threshold)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                let c = out.confusion;
                println!("n {}", c.total());
                println!("tp {} tn {} fp {} fn {}", c.tp, c.tn, c.fp, c.fn_);
                println!("accuracy {:.6}", out.metrics.accuracy);
                println!("precision {:.6}", out.metrics.precision);
                println!("recall {:.6}", out.metrics.recall);
                println!("f1 {:.6}", out.metrics.f1);
                match out.roc_auc {
                    Some(a) => println!("roc_auc {a:.6}"),
                    None => println!("roc_auc undefined"),
                }
                if let Some(a) = out.patient_level_auc {
                    println!("patient_level_auc {a:.6}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Profile { config, repeats } => {
            let cfg = PipelineConfig::load(config)?;
            let report = profile(&cfg, *repeats)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{} frames x {} repeats, warm-up {} frames, {:.1} frames/s",
                    report.frames, report.repeats, report.warm_up, report.frames_per_second
                );
                println!("{:<8} {:>6} {:>10} {:>10} {:>10} {:>10}", "stage", "count", "mean_ms", "p50_ms", "p95_ms", "max_ms");
                for s in &report.stages {
                    let name = serde_json::to_value(s.stage)?;
                    println!(
                        "{:<8} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                        name.as_str().unwrap_or("?"),
                        s.count,
                        s.mean_ms,
                        s.p50_ms,
                        s.p95_ms,
                        s.max_ms
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::NumericsCheck { seed } => {
            let report = run_suite(*seed)?;
            print_suite(cli.json, &report)?;
            Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Registry { action } => registry_command(cli.json, action),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn emit_summary(json: bool, summary: &RunSummary) -> Result<ExitCode> {
    if json {
        println!("{}", serde_json::to_string_pretty(summary)?);
    } else {
        println!("frames processed  {}", summary.frames_processed);
        println!("frames failed     {}", summary.frames_failed);
        println!("faces detected    {}", summary.faces_detected);
        println!("faces matched     {}", summary.faces_matched);
        println!("faces discarded   {}", summary.faces_discarded);
        println!("samples stored    {}", summary.samples_stored);
        println!("verdicts emitted  {}", summary.verdicts_emitted);
        println!("reports written   {}", summary.reports_written);
        for w in &summary.windows {
            println!(
                "  {} [{}, {}) n={} mean={:.3} {} p={:.3e} level={}",
                w.subject_id,
                w.t_start,
                w.t_end,
                w.count,
                w.mean,
                w.direction,
                w.p_value,
                w.level.as_str()
            );
        }
    }
    Ok(if summary.frames_failed > 0 {
        ExitCode::from(EXIT_FRAME_ERRORS)
    } else {
        ExitCode::SUCCESS
    })
}

fn on_demand_report(
    out: &Path,
    subject: &str,
    now_ms: Option<i64>,
    window_ms: i64,
    change: &ChangeTestConfig,
    thresholds: Thresholds,
    endpoint: Option<&LlmEndpoint>,
) -> Result<RiskReport> {
    if !out.is_dir() {
        return Err(Error::NotFound(format!("output root {}", out.display())));
    }
    let db = RecordsDb::open(out)?;
    // surface an unknown subject before choosing a time
    db.profile(subject)?;
    let now = match now_ms {
        Some(t) => t,
        None => db.samples(subject).last().map_or(0, |s| s.timestamp_ms + 1),
    };
    let inputs = db.fetch_context(subject, now, window_ms, change)?;
    let ctx = ReportContext::from_inputs(inputs, thresholds)?;
    let report = generate_report(&ctx, endpoint, now);
    let dir = out
        .join("reports")
        .join(digitalshadow::records::encode_subject_id(subject));
    std::fs::create_dir_all(&dir).map_err(|e| Error::InvalidInput(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{now}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    Ok(report)
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    score: f64,
    truth: String,
    #[serde(default)]
    subject_id: Option<String>,
}

#[derive(Debug, Serialize)]
struct MetricsOutput {
    confusion: ConfusionCounts,
    metrics: Metrics,
    roc_auc: Option<f64>,
    /// AUC over per-subject mean scores, when subject ids are present.
    patient_level_auc: Option<f64>,
}

fn parse_truth(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(Error::InvalidInput(format!("truth value {other:?} is not 0/1"))),
    }
}

fn score_file_metrics(path: &Path, threshold: f64) -> Result<MetricsOutput> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut by_subject: BTreeMap<String, (Vec<f64>, bool)> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: ScoreRow = row?;
        let truth = parse_truth(&row.truth)?;
        if let Some(id) = row.subject_id.filter(|s| !s.is_empty()) {
            let entry = by_subject.entry(id.clone()).or_insert_with(|| (Vec::new(), truth));
            if entry.1 != truth {
                return Err(Error::InvalidInput(format!("subject {id} has conflicting truth labels")));
            }
            entry.0.push(row.score);
        }
        scores.push(row.score);
        labels.push(truth);
    }
    let c = confusion(&scores, &labels, threshold)?;
    let m = metrics(&c)?;
    let auc = match roc_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let patient_level_auc = if by_subject.is_empty() {
        None
    } else {
        let (s, l): (Vec<f64>, Vec<bool>) = by_subject
            .values()
            .map(|(v, y)| (v.iter().sum::<f64>() / v.len() as f64, *y))
            .unzip();
        roc_auc(&s, &l).ok()
    };
    Ok(MetricsOutput {
        confusion: c,
        metrics: m,
        roc_auc: auc,
        patient_level_auc,
    })
}

fn print_suite(json: bool, report: &SuiteReport) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
        return Ok(());
    }
    println!("numerics oracle suite, seed {}", report.seed);
    for c in &report.checks {
        println!(
            "{} {:<28} {:>5}/{:<5} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.successes,
            c.trials,
            c.detail
        );
    }
    Ok(())
}

fn registry_command(json: bool, action: &RegistryAction) -> Result<ExitCode> {
    match action {
        RegistryAction::Init { path, dimension } => {
            if *dimension == 0 {
                return Err(Error::InvalidInput("dimension must be positive".into()));
            }
            if path.exists() {
                return Err(Error::InvalidInput(format!("{} already exists", path.display())));
            }
            FaceRegistry::new(*dimension).save(path)?;
        }
        RegistryAction::Add {
            path,
            label,
            embedding,
        } => {
            let mut reg = FaceRegistry::load(path)?;
            reg.register_face(&FaceEmbedding::normalized(embedding.clone())?, label)?;
            reg.save(path)?;
        }
        RegistryAction::List { path } => {
            let reg = FaceRegistry::load(path)?;
            let rows: Vec<(String, usize)> = reg
                .labels()
                .map(|l| (l.to_string(), reg.templates(l).map_or(0, <[_]>::len)))
                .collect();
            if json {
                let v: Vec<serde_json::Value> = rows
                    .iter()
                    .map(|(l, n)| serde_json::json!({"label": l, "templates": n}))
                    .collect();
                println!(
                    "{}",
                    serde_json::to_string_pretty(&serde_json::json!({
                        "dimension": reg.dimension(),
                        "identities": v,
                    }))?
                );
            } else {
                println!("dimension {}", reg.dimension());
                for (l, n) in rows {
                    println!("{l}\t{n}");
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
