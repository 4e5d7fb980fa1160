//! Longitudinal risk analytics.
//!
//! [`RiskStore`] is an append-only JSONL log of `(subject_id, timestamp_ms,
//! value)` samples with a per-subject in-memory index. On top of it sit the
//! window descriptors, histogram KL divergence, a two-sided Mann–Whitney U
//! change test and patient-level aggregation.
//!
//! Conventions: variance is the population variance; histograms use `B`
//! equal-width bins over [0, 1] with the last bin closed at 1.0; window-to-window
//! KL is reported as `D(current ‖ previous)` in nats.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::average_ranks;
use crate::stream::RiskProcess;

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_KL_EPSILON: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Windows smaller than this get a `none` verdict with p = 1.
pub const MIN_WINDOW_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSample {
    pub subject_id: String,
    pub timestamp_ms: i64,
    pub value: f64,
}

impl RiskSample {
    pub fn new(subject_id: impl Into<String>, timestamp_ms: i64, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange(value));
        }
        Ok(RiskSample {
            subject_id: subject_id.into(),
            timestamp_ms,
            value,
        })
    }
}

/// Append-only risk-sample log.
///
/// Lines are flushed and synced every `batch_size` appends. Per-subject
/// series are kept sorted by timestamp; equal timestamps keep append order.
#[derive(Debug)]
pub struct RiskStore {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    batch_size: usize,
    pending: usize,
    series: HashMap<String, Vec<RiskSample>>,
}

impl RiskStore {
    pub fn in_memory() -> Self {
        RiskStore {
            path: None,
            writer: None,
            batch_size: 1,
            pending: 0,
            series: HashMap::new(),
        }
    }

    /// Open (or create) a JSONL store, loading any existing samples.
    pub fn open(path: &Path, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("store batch size must be at least 1".into()));
        }
        let mut store = RiskStore {
            path: Some(path.to_path_buf()),
            writer: None,
            batch_size,
            pending: 0,
            series: HashMap::new(),
        };
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let sample: RiskSample = serde_json::from_str(&line).map_err(|e| {
                    Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1))
                })?;
                store.index(sample);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        store.writer = Some(BufWriter::new(file));
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn index(&mut self, sample: RiskSample) {
        let series = self.series.entry(sample.subject_id.clone()).or_default();
        let pos = series.partition_point(|s| s.timestamp_ms <= sample.timestamp_ms);
        series.insert(pos, sample);
    }

    pub fn append(&mut self, sample: RiskSample) -> Result<()> {
        if !(0.0..=1.0).contains(&sample.value) {
            return Err(Error::OutOfRange(sample.value));
        }
        if let Some(w) = self.writer.as_mut() {
            let line = serde_json::to_string(&sample)?;
            let path = self.path.as_deref().unwrap_or(Path::new(""));
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
            self.pending += 1;
            if self.pending >= self.batch_size {
                self.flush()?;
            }
        }
        self.index(sample);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            let path = self.path.as_deref().unwrap_or(Path::new(""));
            w.flush().map_err(|e| Error::io(path, e))?;
            w.get_ref().sync_data().map_err(|e| Error::io(path, e))?;
        }
        self.pending = 0;
        Ok(())
    }

    /// All samples of a subject, sorted by timestamp.
    pub fn samples(&self, subject_id: &str) -> &[RiskSample] {
        self.series.get(subject_id).map_or(&[], Vec::as_slice)
    }

    /// Samples with `start <= t < end`.
    pub fn range(&self, subject_id: &str, start_ms: i64, end_ms: i64) -> &[RiskSample] {
        let s = self.samples(subject_id);
        let lo = s.partition_point(|x| x.timestamp_ms < start_ms);
        let hi = s.partition_point(|x| x.timestamp_ms < end_ms);
        &s[lo..hi.max(lo)]
    }

    pub fn subjects(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.series.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    pub fn len(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for RiskStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub histogram: Vec<f64>,
    pub t_start: i64,
    pub t_end: i64,
    /// False for an empty window; mean/variance/histogram are then zeros.
    pub defined: bool,
}

impl WindowStats {
    pub fn empty(bins: usize, t_start: i64, t_end: i64) -> Self {
        WindowStats {
            count: 0,
            mean: 0.0,
            variance: 0.0,
            histogram: vec![0.0; bins],
            t_start,
            t_end,
            defined: false,
        }
    }

    pub fn with_bounds(mut self, t_start: i64, t_end: i64) -> Self {
        self.t_start = t_start;
        self.t_end = t_end;
        self
    }
}

pub fn bin_index(value: f64, bins: usize) -> usize {
    ((value * bins as f64).floor() as usize).min(bins - 1)
}

/// Normalized histogram of values in [0, 1].
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    for &v in values {
        h[bin_index(v, bins)] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Descriptors of one window of values. `t_start`/`t_end` are set from the
/// samples; use [`WindowStats::with_bounds`] to pin them to a window.
pub fn window_stats(samples: &[RiskSample], bins: usize) -> Result<WindowStats> {
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    if samples.is_empty() {
        return Ok(WindowStats::empty(bins, 0, 0));
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, s) in samples.iter().enumerate() {
        if !(0.0..=1.0).contains(&s.value) {
            return Err(Error::OutOfRange(s.value));
        }
        let delta = s.value - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (s.value - mean);
    }
    let n = samples.len();
    let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let t_start = samples.iter().map(|s| s.timestamp_ms).min().unwrap_or(0);
    let t_end = samples.iter().map(|s| s.timestamp_ms).max().unwrap_or(0);
    Ok(WindowStats {
        count: n,
        mean,
        variance: (m2 / n as f64).max(0.0),
        histogram: histogram(&values, bins),
        t_start,
        t_end,
        defined: true,
    })
}

/// `Σ P'·ln(P'/Q')` in nats, where `P' = (P+ε)/Σ(P+ε)` and likewise for Q.
/// Empty bins of P contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::InvalidInput("empty histograms".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("smoothing must be >= 0, got {epsilon}")));
    }
    if p.iter().chain(q).any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidInput("histogram masses must be finite and >= 0".into()));
    }
    let p_total: f64 = p.iter().map(|x| x + epsilon).sum();
    let q_total: f64 = q.iter().map(|x| x + epsilon).sum();
    if p_total == 0.0 || q_total == 0.0 {
        return Err(Error::Undefined("histogram with zero total mass".into()));
    }
    let mut d = 0.0;
    for (pb, qb) in p.iter().zip(q) {
        let ps = (pb + epsilon) / p_total;
        let qs = (qb + epsilon) / q_total;
        if ps == 0.0 {
            continue;
        }
        if qs == 0.0 {
            return Err(Error::Undefined(
                "KL divergence is infinite: Q has an empty bin where P has mass".into(),
            ));
        }
        d += ps * (ps / qs).ln();
    }
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    None,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::None => "none",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeVerdict {
    pub direction: Direction,
    pub p_value: f64,
    /// `D(current ‖ previous)` between the window histograms.
    pub kl: f64,
    /// `mean(current) - mean(previous)`.
    pub effect_size: f64,
    /// Mann–Whitney U of the current window (pairs where current > previous,
    /// ties counted one half).
    pub u_statistic: f64,
    pub small_sample: bool,
}

impl ChangeVerdict {
    pub fn no_data() -> Self {
        ChangeVerdict {
            direction: Direction::None,
            p_value: 1.0,
            kl: 0.0,
            effect_size: 0.0,
            u_statistic: 0.0,
            small_sample: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeTestConfig {
    pub alpha: f64,
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for ChangeTestConfig {
    fn default() -> Self {
        ChangeTestConfig {
            alpha: DEFAULT_ALPHA,
            bins: DEFAULT_BINS,
            epsilon: DEFAULT_KL_EPSILON,
        }
    }
}

/// U statistic of `b` against `a`: `#{(i, j): b_j > a_i} + ½·#{ties}`,
/// computed from rank sums.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> f64 {
    let joined: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&joined);
    let nb = b.len() as f64;
    let rb: f64 = ranks[a.len()..].iter().sum();
    rb - nb * (nb + 1.0) / 2.0
}

/// Two-sided Mann–Whitney U p-value, normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney_p(a: &[f64], b: &[f64]) -> (f64, f64) {
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let joined: Vec<f64> = a.iter().chain(b).copied().collect();
    let u = mann_whitney_u(a, b);
    let n = na + nb;
    let mut sorted = joined;
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let mu = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return (u, 1.0);
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let p = libm::erfc(z / std::f64::consts::SQRT_2);
    (u, p.clamp(0.0, 1.0))
}

/// Compare a previous window against the current one.
pub fn change_test(previous: &[f64], current: &[f64], config: &ChangeTestConfig) -> Result<ChangeVerdict> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must be in (0, 1), got {}", config.alpha)));
    }
    if previous.iter().chain(current).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("window values must lie in [0, 1]".into()));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let effect_size = mean(current) - mean(previous);
    let kl = if previous.is_empty() || current.is_empty() {
        0.0
    } else {
        kl_divergence(
            &histogram(current, config.bins),
            &histogram(previous, config.bins),
            config.epsilon,
        )?
    };
    if previous.len() < MIN_WINDOW_SAMPLES || current.len() < MIN_WINDOW_SAMPLES {
        return Ok(ChangeVerdict {
            direction: Direction::None,
            p_value: 1.0,
            kl,
            effect_size,
            u_statistic: if previous.is_empty() || current.is_empty() {
                0.0
            } else {
                mann_whitney_u(previous, current)
            },
            small_sample: true,
        });
    }
    let (u, p_value) = mann_whitney_p(previous, current);
    let direction = if p_value < config.alpha {
        if effect_size > 0.0 {
            Direction::Up
        } else if effect_size < 0.0 {
            Direction::Down
        } else {
            Direction::None
        }
    } else {
        Direction::None
    };
    Ok(ChangeVerdict {
        direction,
        p_value,
        kl,
        effect_size,
        u_statistic: u,
        small_sample: false,
    })
}

/// Patient-level score: the mean of a subject's image-level scores.
pub fn patient_level_score(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("patient-level score of no samples".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-subject patient-level scores.
pub fn patient_level_scores(samples: &[RiskSample]) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.subject_id.clone()).or_default().push(s.value);
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (k, m)
        })
        .collect()
}

/// Interval between successive draws of a process in the stability
/// simulation (one frame at 30 fps).
const STABILITY_SAMPLE_INTERVAL_MS: i64 = 33;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub window_size: usize,
    /// Sample variance (n - 1 denominator) of the repeated window means.
    pub variance: f64,
}

/// How the variance of a window mean shrinks with window length.
pub fn stability_curve(
    process: &RiskProcess,
    window_sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<StabilityPoint>> {
    process.validate()?;
    if repeats < 2 {
        return Err(Error::InvalidInput("need at least 2 repeats".into()));
    }
    if window_sizes.is_empty()
        || window_sizes[0] == 0
        || window_sizes.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::InvalidInput(
            "window sizes must be positive and strictly increasing".into(),
        ));
    }
    window_sizes
        .iter()
        .map(|&size| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &format!("window-{size}")));
            let means: Vec<f64> = (0..repeats)
                .map(|_| {
                    let total: f64 = (0..size)
                        .map(|k| process.sample(k as i64 * STABILITY_SAMPLE_INTERVAL_MS, &mut rng))
                        .sum();
                    total / size as f64
                })
                .collect();
            let m = means.iter().sum::<f64>() / repeats as f64;
            let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (repeats - 1) as f64;
            Ok(StabilityPoint {
                window_size: size,
                variance: var,
            })
        })
        .collect()
}

/// Synthetic labeled cohort: each subject has a latent risk drawn from the
/// process of its class, and each image score is the latent risk plus
/// Gaussian noise, clamped to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub subjects: usize,
    pub images_per_subject: usize,
    pub noise_sigma: f64,
    pub positive_fraction: f64,
    pub positive_latent: RiskProcess,
    pub negative_latent: RiskProcess,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            subjects: 200,
            images_per_subject: 4,
            noise_sigma: 0.15,
            positive_fraction: 0.5,
            positive_latent: RiskProcess::Beta { a: 12.0, b: 8.0 },
            negative_latent: RiskProcess::Beta { a: 8.0, b: 12.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub image_scores: Vec<f64>,
    pub image_labels: Vec<bool>,
    pub image_subjects: Vec<usize>,
    pub subject_scores: Vec<f64>,
    pub subject_labels: Vec<bool>,
}

pub fn simulate_cohort(spec: &CohortSpec, seed: u64) -> Result<Cohort> {
    spec.positive_latent.validate()?;
    spec.negative_latent.validate()?;
    if spec.subjects < 2 || spec.images_per_subject == 0 {
        return Err(Error::InvalidInput("cohort needs >= 2 subjects and >= 1 image".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidInput("noise sigma must be >= 0".into()));
    }
    let positives = (spec.positive_fraction * spec.subjects as f64).round() as usize;
    if positives == 0 || positives >= spec.subjects {
        return Err(Error::InvalidInput("cohort needs both classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut cohort = Cohort {
        image_scores: Vec::new(),
        image_labels: Vec::new(),
        image_subjects: Vec::new(),
        subject_scores: Vec::new(),
        subject_labels: Vec::new(),
    };
    for subject in 0..spec.subjects {
        let positive = subject < positives;
        let latent = if positive {
            &spec.positive_latent
        } else {
            &spec.negative_latent
        }
        .sample(0, &mut rng);
        let mut images = Vec::with_capacity(spec.images_per_subject);
        for _ in 0..spec.images_per_subject {
            let eps = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let s = (latent + eps).clamp(0.0, 1.0);
            images.push(s);
            cohort.image_scores.push(s);
            cohort.image_labels.push(positive);
            cohort.image_subjects.push(subject);
        }
        cohort.subject_scores.push(patient_level_score(&images)?);
        cohort.subject_labels.push(positive);
    }
    Ok(cohort)
}

/// Adjacent tumbling windows. A window closes when its duration has elapsed
/// or it holds `max_samples`, whichever comes first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    pub duration_ms: i64,
    pub max_samples: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            duration_ms: 24 * 60 * 60 * 1000,
            max_samples: 1000,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration_ms <= 0 || self.max_samples == 0 {
            return Err(Error::Config(
                "window duration and sample cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedWindow {
    pub t_start: i64,
    /// Exclusive end.
    pub t_end: i64,
    pub samples: Vec<RiskSample>,
}

/// Per-subject tumbling-window accumulator.
#[derive(Debug, Clone)]
pub struct TumblingWindows {
    spec: WindowSpec,
    start: Option<i64>,
    current: Vec<RiskSample>,
}

impl TumblingWindows {
    pub fn new(spec: WindowSpec) -> Self {
        TumblingWindows {
            spec,
            start: None,
            current: Vec::new(),
        }
    }

    /// Feed the next sample (timestamps non-decreasing). Returns the window
    /// that this sample closed, if any.
    pub fn push(&mut self, sample: RiskSample) -> Option<ClosedWindow> {
        let ts = sample.timestamp_ms;
        let start = *self.start.get_or_insert(ts);
        let mut closed = None;
        if ts >= start + self.spec.duration_ms {
            let t_end = start + self.spec.duration_ms;
            closed = Some(ClosedWindow {
                t_start: start,
                t_end,
                samples: std::mem::take(&mut self.current),
            });
            let periods = (ts - start) / self.spec.duration_ms;
            self.start = Some(start + periods * self.spec.duration_ms);
        } else if self.current.len() >= self.spec.max_samples {
            closed = Some(ClosedWindow {
                t_start: start,
                t_end: ts,
                samples: std::mem::take(&mut self.current),
            });
            self.start = Some(ts);
        }
        self.current.push(sample);
        closed.filter(|w| !w.samples.is_empty())
    }

    /// Close the open window at end of input.
    pub fn finish(&mut self) -> Option<ClosedWindow> {
        let start = self.start.take()?;
        if self.current.is_empty() {
            return None;
        }
        let samples = std::mem::take(&mut self.current);
        let last = samples.last().map_or(start, |s| s.timestamp_ms);
        Some(ClosedWindow {
            t_start: start,
            t_end: (start + self.spec.duration_ms).min(last + 1),
            samples,
        })
    }
}
