//! Risk reports from assembled context.
//!
//! The risk level is always decided by [`classify_level`]; a language model,
//! when configured, only writes the narrative. Any transport failure falls
//! back to a deterministic template narrative.
//!
//! Wire format (any chat-completion compatible server):
//!
//! ```text
//! POST {base_url}/v1/chat/completions
//! {"model": .., "messages": [{"role":"system",..},{"role":"user","content": prompt}], "temperature": 0}
//! → {"choices": [{"message": {"content": ".."}}]}
//! ```

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::analytics::{ChangeVerdict, Direction, WindowStats};
use crate::error::{Error, Result};
use crate::records::{ContextInputs, SubjectProfile};

/// Environment variable holding an optional bearer token for the LLM endpoint.
pub const TOKEN_ENV: &str = "DIGITALSHADOW_LLM_TOKEN";

pub const SYSTEM_PROMPT: &str = "You are a cautious cardiovascular health assistant. \
You summarize passively collected, camera-based coronary artery disease risk estimates \
for one person. You never diagnose. Write short, plain-language paragraphs followed by \
concrete next steps, and say clearly that the estimate is not a medical diagnosis.";

pub const DEFAULT_TEMPLATE: &str = "Prepare a short health report for subject {subject_id}.

Profile: age {age}, sex {sex}. Chief complaint: {chief_complaint}.

Camera-based coronary artery disease risk estimates (0 = lowest, 1 = highest):
- mean risk in the current window: {mean_now}
- mean risk in the previous window: {mean_prev}
- patient-level risk: {patient_level}
- trend between windows: {direction} (two-sided Mann-Whitney p = {p_value}, KL divergence {kl} nats)
- assigned risk level: {level}

Explain what the trend means for this person, then list two or three practical recommendations. \
Do not change the assigned risk level.";

const PLACEHOLDERS: &[&str] = &[
    "subject_id",
    "age",
    "sex",
    "chief_complaint",
    "mean_now",
    "mean_prev",
    "direction",
    "p_value",
    "kl",
    "patient_level",
    "level",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            low: 0.35,
            high: 0.65,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= low < high <= 1, got ({}, {})",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub profile: SubjectProfile,
    pub current: WindowStats,
    pub previous: WindowStats,
    pub verdict: ChangeVerdict,
    pub patient_level: f64,
    pub thresholds: Thresholds,
}

impl ReportContext {
    pub fn from_inputs(inputs: ContextInputs, thresholds: Thresholds) -> Result<Self> {
        thresholds.validate()?;
        Ok(ReportContext {
            profile: inputs.profile,
            current: inputs.current,
            previous: inputs.previous,
            verdict: inputs.verdict,
            patient_level: inputs.patient_level,
            thresholds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Moderate,
    High,
}

impl RiskLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RiskLevel::Low => "low",
            RiskLevel::Moderate => "moderate",
            RiskLevel::High => "high",
        }
    }
}

/// High at or above `high`, or on a significant upward trend once at or above
/// `low`. Low below `low` without an upward trend. Moderate otherwise.
pub fn classify_level(patient_level: f64, direction: Direction, thresholds: &Thresholds) -> RiskLevel {
    let up = direction == Direction::Up;
    if patient_level >= thresholds.high || (up && patient_level >= thresholds.low) {
        RiskLevel::High
    } else if patient_level < thresholds.low && !up {
        RiskLevel::Low
    } else {
        RiskLevel::Moderate
    }
}

pub fn classify(ctx: &ReportContext) -> RiskLevel {
    classify_level(ctx.patient_level, ctx.verdict.direction, &ctx.thresholds)
}

fn mean_or_na(w: &WindowStats) -> String {
    if w.defined {
        format!("{:.3}", w.mean)
    } else {
        "n/a".to_string()
    }
}

fn placeholder_value(ctx: &ReportContext, name: &str) -> Option<String> {
    let r = &ctx.profile.health_record;
    Some(match name {
        "subject_id" => ctx.profile.subject_id.clone(),
        "age" => r.age_years.map_or_else(|| "unknown".to_string(), |a| a.to_string()),
        "sex" => r.sex.map_or("unknown", |s| s.as_str()).to_string(),
        "chief_complaint" => {
            if r.chief_complaint.is_empty() {
                "none recorded".to_string()
            } else {
                r.chief_complaint.clone()
            }
        }
        "mean_now" => mean_or_na(&ctx.current),
        "mean_prev" => mean_or_na(&ctx.previous),
        "direction" => ctx.verdict.direction.as_str().to_string(),
        "p_value" => format!("{:.3}", ctx.verdict.p_value),
        "kl" => format!("{:.3}", ctx.verdict.kl),
        "patient_level" => format!("{:.3}", ctx.patient_level),
        "level" => classify(ctx).as_str().to_string(),
        _ => return None,
    })
}

/// Substitute `{name}` placeholders. `{{` and `}}` produce literal braces.
pub fn build_prompt(ctx: &ReportContext, template: &str) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 128);
    let mut chars = template.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if matches!(chars.peek(), Some((_, '{'))) => {
                chars.next();
                out.push('{');
            }
            '}' if matches!(chars.peek(), Some((_, '}'))) => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let rest = &template[i + 1..];
                let end = rest
                    .find('}')
                    .ok_or_else(|| Error::Template(rest.chars().take(24).collect()))?;
                let name = &rest[..end];
                if !PLACEHOLDERS.contains(&name) {
                    return Err(Error::Template(name.to_string()));
                }
                out.push_str(&placeholder_value(ctx, name).expect("known placeholder"));
                // skip the name and the closing brace
                for _ in 0..=name.chars().count() {
                    chars.next();
                }
            }
            _ => out.push(c),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    500
}

impl LlmEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        LlmEndpoint {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("LLM timeout must be positive".into()));
        }
        if self.base_url.is_empty() {
            return Err(Error::Config("LLM base_url must be set".into()));
        }
        Ok(())
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

enum Attempt {
    Retryable(Error),
    Fatal(Error),
}

fn is_retryable_status(status: u16) -> bool {
    matches!(status, 408 | 429) || (500..600).contains(&status)
}

fn attempt(client: &reqwest::blocking::Client, endpoint: &LlmEndpoint, body: &ChatRequest<'_>) -> std::result::Result<String, Attempt> {
    let mut req = client.post(endpoint.url()).json(body);
    if let Ok(token) = std::env::var(TOKEN_ENV) {
        if !token.is_empty() {
            req = req.bearer_auth(token);
        }
    }
    let resp = req
        .send()
        .map_err(|e| Attempt::Retryable(Error::Transport(e.to_string())))?;
    let status = resp.status().as_u16();
    let text = resp
        .text()
        .map_err(|e| Attempt::Retryable(Error::Transport(e.to_string())))?;
    if !(200..300).contains(&status) {
        let err = Error::Transport(format!("HTTP {status}"));
        return Err(if is_retryable_status(status) {
            Attempt::Retryable(err)
        } else {
            Attempt::Fatal(err)
        });
    }
    let parsed: ChatResponse = serde_json::from_str(&text)
        .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed completion body: {e}"))))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| Attempt::Fatal(Error::Protocol("completion has no choices".into())))
}

/// One chat completion. Transport failures and 408/429/5xx responses are
/// retried up to `max_retries` times with exponential backoff; malformed
/// bodies fail immediately.
pub fn llm_complete(endpoint: &LlmEndpoint, prompt: &str) -> Result<String> {
    endpoint.validate()?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(endpoint.timeout_ms))
        .build()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let body = ChatRequest {
        model: &endpoint.model_name,
        messages: vec![
            ChatMessage {
                role: "system",
                content: SYSTEM_PROMPT,
            },
            ChatMessage {
                role: "user",
                content: prompt,
            },
        ],
        temperature: 0.0,
    };
    let mut retries = 0;
    loop {
        match attempt(&client, endpoint, &body) {
            Ok(text) => return Ok(text),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retryable(e)) => {
                if retries >= endpoint.max_retries {
                    return Err(e);
                }
                let delay = endpoint.backoff_base_ms.saturating_mul(1u64 << retries.min(16));
                log::warn!("LLM request failed ({e}); retrying in {delay} ms");
                std::thread::sleep(Duration::from_millis(delay));
                retries += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Llm,
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub field: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub subject_id: String,
    pub level: RiskLevel,
    pub narrative: String,
    pub recommendations: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub generated_ms: i64,
    pub generator: Generator,
}

impl RiskReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Risk report for {}", self.subject_id);
        let _ = writeln!(s, "Risk level: {}", self.level.as_str());
        let _ = writeln!(s);
        let _ = writeln!(s, "{}", self.narrative.trim_end());
        let _ = writeln!(s);
        let _ = writeln!(s, "Recommendations:");
        for r in &self.recommendations {
            let _ = writeln!(s, "- {r}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Data used:");
        for p in &self.provenance {
            let _ = writeln!(s, "  {}: {}", p.field, p.value);
        }
        s
    }
}

fn provenance(ctx: &ReportContext) -> Vec<Provenance> {
    let r = &ctx.profile.health_record;
    let entry = |f: &str, v: String| Provenance {
        field: f.to_string(),
        value: v,
    };
    vec![
        entry("profile.subject_id", ctx.profile.subject_id.clone()),
        entry(
            "health_record.age_years",
            r.age_years.map_or_else(|| "unknown".into(), |a| a.to_string()),
        ),
        entry("health_record.sex", r.sex.map_or("unknown", |s| s.as_str()).into()),
        entry("health_record.chief_complaint", r.chief_complaint.clone()),
        entry("current.count", ctx.current.count.to_string()),
        entry("current.mean", mean_or_na(&ctx.current)),
        entry(
            "current.window",
            format!("[{}, {})", ctx.current.t_start, ctx.current.t_end),
        ),
        entry("previous.count", ctx.previous.count.to_string()),
        entry("previous.mean", mean_or_na(&ctx.previous)),
        entry(
            "previous.window",
            format!("[{}, {})", ctx.previous.t_start, ctx.previous.t_end),
        ),
        entry("verdict.direction", ctx.verdict.direction.as_str().into()),
        entry("verdict.p_value", format!("{:.6}", ctx.verdict.p_value)),
        entry("verdict.kl", format!("{:.6} (current || previous, nats)", ctx.verdict.kl)),
        entry("verdict.effect_size", format!("{:.6}", ctx.verdict.effect_size)),
        entry("patient_level", format!("{:.6}", ctx.patient_level)),
        entry(
            "thresholds",
            format!("low {:.3}, high {:.3}", ctx.thresholds.low, ctx.thresholds.high),
        ),
    ]
}

fn recommendations(level: RiskLevel, direction: Direction) -> Vec<String> {
    let mut out: Vec<String> = match level {
        RiskLevel::High => vec![
            "Arrange a cardiovascular assessment with a physician soon (for example an ECG and a lipid panel).".into(),
            "Seek urgent care for chest pain, breathlessness or fainting.".into(),
            "Keep the camera monitoring running and review the trend after the next window.".into(),
        ],
        RiskLevel::Moderate => vec![
            "Schedule a routine check-up with a primary care physician.".into(),
            "Keep up regular physical activity, a balanced diet and enough sleep.".into(),
            "Continue monitoring and watch for an upward trend.".into(),
        ],
        RiskLevel::Low => vec![
            "Keep up current healthy habits.".into(),
            "Continue routine monitoring.".into(),
        ],
    };
    if direction == Direction::Up && level != RiskLevel::High {
        out.insert(0, "Risk rose significantly compared with the previous window; consider an earlier check-up.".into());
    }
    out
}

pub fn template_narrative(ctx: &ReportContext) -> String {
    let level = classify(ctx);
    let r = &ctx.profile.health_record;
    let trend = match ctx.verdict.direction {
        Direction::Up => "rose significantly",
        Direction::Down => "fell significantly",
        Direction::None => "showed no significant change",
    };
    let mut s = format!(
        "Subject {} has a patient-level risk of {:.3} from {} camera observations in the current window",
        ctx.profile.subject_id, ctx.patient_level, ctx.current.count
    );
    if ctx.previous.defined {
        let _ = write!(s, " (previous window mean {:.3}).", ctx.previous.mean);
    } else {
        s.push_str(" (no previous window to compare).");
    }
    let _ = write!(
        s,
        " Compared with the previous window the risk {trend} (p = {:.3}, KL divergence {:.3} nats).",
        ctx.verdict.p_value, ctx.verdict.kl
    );
    if !r.chief_complaint.is_empty() {
        let _ = write!(s, " Recorded chief complaint: {}.", r.chief_complaint);
    }
    let _ = write!(
        s,
        " Overall risk level: {}. This estimate comes from passive video analysis and is not a diagnosis.",
        level.as_str()
    );
    s
}

/// Build a report. With an endpoint the narrative comes from the LLM; on any
/// LLM failure (or without an endpoint) the template narrative is used and
/// the failure is recorded in the provenance.
pub fn generate_report(ctx: &ReportContext, endpoint: Option<&LlmEndpoint>, generated_ms: i64) -> RiskReport {
    generate_report_with_template(ctx, endpoint, DEFAULT_TEMPLATE, generated_ms)
}

pub fn generate_report_with_template(
    ctx: &ReportContext,
    endpoint: Option<&LlmEndpoint>,
    template: &str,
    generated_ms: i64,
) -> RiskReport {
    let level = classify(ctx);
    let mut provenance = provenance(ctx);
    let llm_text = endpoint.and_then(|ep| {
        let result = build_prompt(ctx, template).and_then(|prompt| llm_complete(ep, &prompt));
        match result {
            Ok(text) => Some(text),
            Err(e) => {
                log::warn!("falling back to template report for {}: {e}", ctx.profile.subject_id);
                provenance.push(Provenance {
                    field: "degraded_mode".into(),
                    value: format!("LLM unavailable, template narrative used: {e}"),
                });
                None
            }
        }
    });
    let (narrative, generator) = match llm_text {
        Some(text) => (text, Generator::Llm),
        None => (template_narrative(ctx), Generator::Template),
    };
    RiskReport {
        subject_id: ctx.profile.subject_id.clone(),
        level,
        narrative,
        recommendations: recommendations(level, ctx.verdict.direction),
        provenance,
        generated_ms,
        generator,
    }
}
