//! Per-face risk scoring and classification metrics.
//!
//! The scorer stands in for a fine-tuned risk model and is pluggable:
//! a noisy oracle around the annotated true risk, a logistic model over the
//! embedding, a lookup into precomputed scores, or an external plug-in.
//!
//! Recall is `tp / (tp + fn)`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::FaceEmbedding;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Stub,
    ExternalFile,
    Plugin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub value: f64,
    pub source: ScoreSource,
}

impl RiskScore {
    pub fn new(value: f64, source: ScoreSource) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange(value));
        }
        Ok(RiskScore { value, source })
    }
}

/// Scorer configuration as it appears in pipeline config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerKind {
    /// `clamp(true_risk + N(0, sigma²), 0, 1)`.
    OracleNoise { sigma: f64 },
    /// `sigmoid(<weights, embedding> + bias)`.
    Logistic { weights: Vec<f64>, bias: f64 },
    /// Precomputed scores keyed by (stream_id, frame_index, label).
    FileLookup { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerHandle {
    #[serde(flatten)]
    pub kind: ScorerKind,
    #[serde(default)]
    pub seed: u64,
}

impl ScorerHandle {
    pub fn oracle_noise(sigma: f64, seed: u64) -> Self {
        ScorerHandle {
            kind: ScorerKind::OracleNoise { sigma },
            seed,
        }
    }
}

/// Everything a scorer may look at for one face.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub embedding: &'a FaceEmbedding,
    pub true_risk: Option<f64>,
    pub stream_id: &'a str,
    pub frame_index: u64,
    pub label: &'a str,
}

pub trait RiskScorer: Send {
    fn score(&mut self, request: &ScoreRequest<'_>) -> Result<f64>;
}

/// A configured, stateful scorer. Seeded variants own their generator.
pub enum Scorer {
    OracleNoise {
        noise: Option<Normal<f64>>,
        rng: ChaCha8Rng,
    },
    Logistic {
        weights: Vec<f64>,
        bias: f64,
    },
    FileLookup(ScoreTable),
    Plugin(Box<dyn RiskScorer>),
}

impl std::fmt::Debug for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scorer::OracleNoise { noise, .. } => write!(f, "OracleNoise({noise:?})"),
            Scorer::Logistic { weights, bias } => {
                write!(f, "Logistic(dim={}, bias={bias})", weights.len())
            }
            Scorer::FileLookup(t) => write!(f, "FileLookup({} scores)", t.len()),
            Scorer::Plugin(_) => f.write_str("Plugin(..)"),
        }
    }
}

impl Scorer {
    /// Build a scorer from its configuration. `stream_seed` is mixed into the
    /// handle's seed so each stream gets its own generator.
    pub fn from_handle(handle: &ScorerHandle, stream_seed: u64) -> Result<Self> {
        match &handle.kind {
            ScorerKind::OracleNoise { sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
                }
                let noise = if *sigma > 0.0 {
                    Some(Normal::new(0.0, *sigma).map_err(|e| Error::Config(e.to_string()))?)
                } else {
                    None
                };
                Ok(Scorer::OracleNoise {
                    noise,
                    rng: ChaCha8Rng::seed_from_u64(crate::splitmix64(handle.seed ^ stream_seed)),
                })
            }
            ScorerKind::Logistic { weights, bias } => {
                if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
                    return Err(Error::Config("logistic weights must be finite".into()));
                }
                Ok(Scorer::Logistic {
                    weights: weights.clone(),
                    bias: *bias,
                })
            }
            ScorerKind::FileLookup { path } => Ok(Scorer::FileLookup(ScoreTable::load(path)?)),
        }
    }

    pub fn score(&mut self, request: &ScoreRequest<'_>) -> Result<RiskScore> {
        match self {
            Scorer::OracleNoise { noise, rng } => {
                let truth = request.true_risk.ok_or_else(|| {
                    Error::Config("oracle_noise scorer needs an annotated true_risk".into())
                })?;
                let eps = noise.as_ref().map_or(0.0, |n| n.sample(rng));
                RiskScore::new((truth + eps).clamp(0.0, 1.0), ScoreSource::Stub)
            }
            Scorer::Logistic { weights, bias } => {
                let e = request.embedding.as_slice();
                if e.len() != weights.len() {
                    return Err(Error::DimensionMismatch {
                        expected: weights.len(),
                        actual: e.len(),
                    });
                }
                let z: f64 = weights.iter().zip(e).map(|(w, x)| w * x).sum::<f64>() + *bias;
                RiskScore::new(sigmoid(z), ScoreSource::Stub)
            }
            Scorer::FileLookup(table) => {
                let v = table
                    .get(request.stream_id, request.frame_index, request.label)
                    .ok_or_else(|| Error::MissingScore {
                        stream_id: request.stream_id.to_string(),
                        frame_index: request.frame_index,
                        label: request.label.to_string(),
                    })?;
                RiskScore::new(v, ScoreSource::ExternalFile)
            }
            Scorer::Plugin(p) => RiskScore::new(p.score(request)?, ScoreSource::Plugin),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    stream_id: String,
    frame_index: u64,
    label: String,
    score: f64,
}

/// Precomputed scores read from a `stream_id,frame_index,label,score` CSV.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    scores: HashMap<(String, u64, String), f64>,
}

impl ScoreTable {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ScoreTable::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut scores = HashMap::new();
        for row in rdr.deserialize() {
            let row: ScoreRow = row?;
            if !(0.0..=1.0).contains(&row.score) {
                return Err(Error::OutOfRange(row.score));
            }
            scores.insert((row.stream_id, row.frame_index, row.label), row.score);
        }
        Ok(ScoreTable { scores })
    }

    pub fn get(&self, stream_id: &str, frame_index: u64, label: &str) -> Option<f64> {
        self.scores
            .get(&(stream_id.to_string(), frame_index, label.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn error_rate(&self) -> f64 {
        (self.fp + self.fn_) as f64 / self.total() as f64
    }
}

/// Predicted positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Which ratios hit a zero denominator (and were reported as 0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Undefined("metrics of an empty confusion table".into()));
    }
    let mut degenerate = Degenerate::default();
    let ratio = |num: u64, den: u64, flag: &mut bool| {
        if den == 0 {
            *flag = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate.precision);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate.recall);
    let f1 = if precision + recall == 0.0 {
        degenerate.f1 = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

fn check_binary_input(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(
            "ROC-AUC needs at least one positive and one negative label".into(),
        ));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank-sum (Mann–Whitney) identity;
/// tied scores contribute one half. O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary_input(scores, labels)?;
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y)
        .map(|(r, _)| r)
        .sum();
    let p = pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok((u / (p * neg as f64)).clamp(0.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// ROC operating points `(fpr, tpr)` from sweeping the threshold down through
/// every distinct score, starting at (0, 0) and ending at (1, 1).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary_input(scores, labels)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &y) in scores.iter().zip(labels) {
            if s >= t {
                if y {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a polyline of ROC points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}
