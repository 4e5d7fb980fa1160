//! Personalized health-record database.
//!
//! Layout under the content root:
//!
//! ```text
//! <root>/profiles/<encoded subject_id>.json   one document per subject
//! <root>/samples.jsonl                        the risk-sample log
//! ```
//!
//! Subject ids are percent-encoded into file names: bytes outside
//! `[A-Za-z0-9_.-]` become `%XX`, and a leading `.` is always encoded.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::analytics::{
    change_test, window_stats, ChangeTestConfig, ChangeVerdict, RiskSample, RiskStore, WindowStats,
};
use crate::error::{Error, Result};
use crate::identity::FaceRegistry;

pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
    Other,
}

impl Sex {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
            Sex::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryNote {
    pub timestamp_ms: i64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_years: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    #[serde(default)]
    pub chief_complaint: String,
    #[serde(default)]
    pub history: Vec<HistoryNote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    #[serde(default = "profile_version")]
    pub version: u32,
    pub subject_id: String,
    pub registry_label: String,
    pub health_record: HealthRecord,
    pub created_ms: i64,
}

fn profile_version() -> u32 {
    PROFILE_VERSION
}

impl SubjectProfile {
    /// A profile with an empty health record.
    pub fn minimal(subject_id: &str, registry_label: &str, created_ms: i64) -> Self {
        SubjectProfile {
            version: PROFILE_VERSION,
            subject_id: subject_id.to_string(),
            registry_label: registry_label.to_string(),
            health_record: HealthRecord {
                subject_id: subject_id.to_string(),
                age_years: None,
                sex: None,
                chief_complaint: String::new(),
                history: Vec::new(),
            },
            created_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.subject_id.is_empty() {
            return bad("subject_id must be non-empty".into());
        }
        if self.registry_label.is_empty() {
            return bad("registry_label must be non-empty".into());
        }
        let r = &self.health_record;
        if r.subject_id != self.subject_id {
            return bad(format!(
                "health record subject {} differs from profile subject {}",
                r.subject_id, self.subject_id
            ));
        }
        if let Some(age) = r.age_years {
            if !(18..=120).contains(&age) {
                return bad(format!("age {age} outside [18, 120]"));
            }
        }
        if r.history.windows(2).any(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
            return bad("history must be sorted by timestamp".into());
        }
        if self.version > PROFILE_VERSION {
            return bad(format!("unsupported profile version {}", self.version));
        }
        Ok(())
    }
}

/// Path-safe file stem for a subject id.
pub fn encode_subject_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for (i, b) in id.bytes().enumerate() {
        let keep = b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || (b == b'.' && i > 0);
        if keep {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn decode_subject_id(stem: &str) -> Option<String> {
    let bytes = stem.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = stem.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

/// The data a report is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextInputs {
    pub profile: SubjectProfile,
    /// `[now - T, now)`
    pub current: WindowStats,
    /// `[now - 2T, now - T)`
    pub previous: WindowStats,
    pub verdict: ChangeVerdict,
    /// Patient-level score of the current window; falls back to the previous
    /// window, then 0 when both are empty.
    pub patient_level: f64,
}

/// Assemble report inputs from a profile and a subject's sample series.
pub fn context_from_samples(
    profile: SubjectProfile,
    previous: &[RiskSample],
    current: &[RiskSample],
    bounds: (i64, i64, i64),
    config: &ChangeTestConfig,
) -> Result<ContextInputs> {
    let (prev_start, split, now) = bounds;
    let previous_stats = window_stats(previous, config.bins)?.with_bounds(prev_start, split);
    let current_stats = window_stats(current, config.bins)?.with_bounds(split, now);
    let prev_values: Vec<f64> = previous.iter().map(|s| s.value).collect();
    let cur_values: Vec<f64> = current.iter().map(|s| s.value).collect();
    let verdict = if prev_values.is_empty() || cur_values.is_empty() {
        let mut v = ChangeVerdict::no_data();
        if current_stats.defined && previous_stats.defined {
            v.effect_size = current_stats.mean - previous_stats.mean;
        }
        v
    } else {
        change_test(&prev_values, &cur_values, config)?
    };
    let patient_level = if current_stats.defined {
        current_stats.mean
    } else if previous_stats.defined {
        previous_stats.mean
    } else {
        0.0
    };
    Ok(ContextInputs {
        profile,
        current: current_stats,
        previous: previous_stats,
        verdict,
        patient_level,
    })
}

#[derive(Debug)]
pub struct RecordsDb {
    root: PathBuf,
    store: RwLock<RiskStore>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl RecordsDb {
    /// Open a database rooted at `root`, creating directories as needed.
    pub fn open(root: &Path) -> Result<Self> {
        RecordsDb::open_with_batch(root, 1)
    }

    pub fn open_with_batch(root: &Path, batch_size: usize) -> Result<Self> {
        let profiles = root.join("profiles");
        fs::create_dir_all(&profiles).map_err(|e| Error::io(&profiles, e))?;
        let store = RiskStore::open(&root.join("samples.jsonl"), batch_size)?;
        Ok(RecordsDb {
            root: root.to_path_buf(),
            store: RwLock::new(store),
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn profile_path(&self, subject_id: &str) -> PathBuf {
        self.root
            .join("profiles")
            .join(format!("{}.json", encode_subject_id(subject_id)))
    }

    fn subject_lock(&self, subject_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        Arc::clone(locks.entry(subject_id.to_string()).or_default())
    }

    /// Insert or replace a profile (last write wins). When a registry is
    /// given, the profile's `registry_label` must be enrolled in it.
    pub fn upsert_profile(&self, profile: &SubjectProfile, registry: Option<&FaceRegistry>) -> Result<()> {
        profile.validate()?;
        if let Some(reg) = registry {
            if !reg.contains(&profile.registry_label) {
                return Err(Error::InvalidInput(format!(
                    "registry label {} is not enrolled",
                    profile.registry_label
                )));
            }
        }
        let lock = self.subject_lock(&profile.subject_id);
        let _guard = lock.lock().expect("subject lock poisoned");
        let path = self.profile_path(&profile.subject_id);
        let text = serde_json::to_string_pretty(profile)?;
        if fs::read_to_string(&path).ok().as_deref() == Some(text.as_str()) {
            return Ok(());
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, &text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn profile(&self, subject_id: &str) -> Result<SubjectProfile> {
        let path = self.profile_path(subject_id);
        if !path.is_file() {
            return Err(Error::NotFound(format!("subject {subject_id}")));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let profile: SubjectProfile = serde_json::from_str(&text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn profiles(&self) -> Result<Vec<SubjectProfile>> {
        let dir = self.root.join("profiles");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".json") {
                if let Some(id) = decode_subject_id(stem) {
                    ids.push(id);
                }
            }
        }
        ids.sort();
        ids.iter().map(|id| self.profile(id)).collect()
    }

    /// Subject linked to a registry label, if any profile names it.
    pub fn subject_for_label(&self, label: &str) -> Result<Option<String>> {
        Ok(self
            .profiles()?
            .into_iter()
            .find(|p| p.registry_label == label)
            .map(|p| p.subject_id))
    }

    pub fn append_sample(&self, sample: RiskSample) -> Result<()> {
        let lock = self.subject_lock(&sample.subject_id);
        let _guard = lock.lock().expect("subject lock poisoned");
        self.store.write().expect("store lock poisoned").append(sample)
    }

    pub fn flush(&self) -> Result<()> {
        self.store.write().expect("store lock poisoned").flush()
    }

    pub fn samples(&self, subject_id: &str) -> Vec<RiskSample> {
        self.store
            .read()
            .expect("store lock poisoned")
            .samples(subject_id)
            .to_vec()
    }

    /// Report inputs for windows `[now-2T, now-T)` and `[now-T, now)`.
    pub fn fetch_context(
        &self,
        subject_id: &str,
        now_ms: i64,
        window_ms: i64,
        config: &ChangeTestConfig,
    ) -> Result<ContextInputs> {
        if window_ms <= 0 {
            return Err(Error::InvalidInput("window length must be positive".into()));
        }
        let profile = self.profile(subject_id)?;
        let store = self.store.read().expect("store lock poisoned");
        let split = now_ms - window_ms;
        let prev_start = now_ms - 2 * window_ms;
        let previous = store.range(subject_id, prev_start, split);
        let current = store.range(subject_id, split, now_ms);
        context_from_samples(profile, previous, current, (prev_start, split, now_ms), config)
    }
}
