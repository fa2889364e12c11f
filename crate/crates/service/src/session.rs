use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};

use auscult::datasets::BinaryLabel;
use auscult::signal::Site;
use serde::{Deserialize, Serialize};

use crate::config::SiteAggregation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symptom {
    Fever,
    Cough,
    Sputum,
    RunnyNose,
    BreathingDifficulty,
    ChestPain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Assessed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    Clipping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    NoAction,
    ConsultPhysician,
}

/// A stored upload. `recording_ref` is the SHA-256 of the raw bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingRef {
    pub recording_ref: String,
    pub site: Site,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub quality_flags: Vec<QualityFlag>,
    pub uploaded_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superseded {
    pub recording: RecordingRef,
    pub replaced_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipVerdict {
    pub p_abnormal: f64,
    pub verdict: BinaryLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteResult {
    pub recording_ref: String,
    /// Mean clip probability.
    pub p_abnormal: f64,
    pub verdict: BinaryLabel,
    pub clip_verdicts: Vec<ClipVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentResult {
    pub session_id: String,
    pub sites: BTreeMap<Site, SiteResult>,
    pub overall_verdict: BinaryLabel,
    pub recommendation: Recommendation,
    pub threshold: f64,
    pub aggregation: SiteAggregation,
    pub model_version: String,
    pub assessed_at: u64,
}

impl AssessmentResult {
    /// Applies the threshold and aggregation rule to per-site clip probabilities.
    pub fn decide(
        session_id: &str,
        sites: BTreeMap<Site, (String, Vec<f64>)>,
        threshold: f64,
        aggregation: SiteAggregation,
        model_version: &str,
    ) -> Self {
        let verdict = |p: f64| {
            if p >= threshold {
                BinaryLabel::Abnormal
            } else {
                BinaryLabel::Normal
            }
        };
        let sites: BTreeMap<Site, SiteResult> = sites
            .into_iter()
            .map(|(site, (recording_ref, clips))| {
                let p = clips.iter().sum::<f64>() / clips.len().max(1) as f64;
                let clip_verdicts = clips
                    .iter()
                    .map(|&p| ClipVerdict {
                        p_abnormal: p,
                        verdict: verdict(p),
                    })
                    .collect();
                let r = SiteResult {
                    recording_ref,
                    p_abnormal: p,
                    verdict: verdict(p),
                    clip_verdicts,
                };
                (site, r)
            })
            .collect();
        let overall = match aggregation {
            SiteAggregation::AnySite => {
                if sites.values().any(|s| s.verdict == BinaryLabel::Abnormal) {
                    BinaryLabel::Abnormal
                } else {
                    BinaryLabel::Normal
                }
            }
            SiteAggregation::MeanOverSites => {
                verdict(sites.values().map(|s| s.p_abnormal).sum::<f64>() / sites.len().max(1) as f64)
            }
        };
        Self {
            session_id: session_id.to_string(),
            sites,
            overall_verdict: overall,
            recommendation: match overall {
                BinaryLabel::Abnormal => Recommendation::ConsultPhysician,
                BinaryLabel::Normal => Recommendation::NoAction,
            },
            threshold,
            aggregation,
            model_version: model_version.to_string(),
            assessed_at: now_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub symptoms: BTreeSet<Symptom>,
    /// Free-text symptom description.
    pub other: Option<String>,
    pub recordings: BTreeMap<Site, RecordingRef>,
    /// Earlier uploads replaced by a later one at the same site.
    pub superseded: Vec<Superseded>,
    pub status: SessionStatus,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub result: Option<AssessmentResult>,
}

impl Session {
    pub fn new(symptoms: BTreeSet<Symptom>, other: Option<String>) -> Self {
        Self {
            session_id: uuid::Uuid::new_v4().to_string(),
            symptoms,
            other,
            recordings: BTreeMap::new(),
            superseded: Vec::new(),
            status: SessionStatus::Open,
            created_at: now_ms(),
            result: None,
        }
    }

    /// Stores `rec` at its site; a previous upload there moves to the audit list.
    pub fn attach(&mut self, rec: RecordingRef) {
        if let Some(old) = self.recordings.insert(rec.site, rec) {
            self.superseded.push(Superseded {
                recording: old,
                replaced_at: now_ms(),
            });
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}
