use std::path::{Path, PathBuf};

use auscult::signal::PreprocessConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// How per-site probabilities become the overall verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteAggregation {
    /// Abnormal when any site reaches the threshold.
    #[default]
    AnySite,
    /// Abnormal when the mean over sites reaches the threshold.
    MeanOverSites,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Without a checkpoint the service still records sessions but cannot assess.
    pub checkpoint: Option<PathBuf>,
    pub threshold: f64,
    pub storage_dir: PathBuf,
    pub aggregation: SiteAggregation,
    pub min_duration_s: f64,
    pub clip_s: f64,
    pub hop_s: f64,
    /// Share of samples at full scale above which an upload is flagged as clipped.
    pub clipping_fraction: f64,
    pub max_upload_bytes: usize,
    pub preprocess: PreprocessConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoint: None,
            threshold: 0.5,
            storage_dir: PathBuf::from("auscult-data"),
            aggregation: SiteAggregation::AnySite,
            min_duration_s: 8.0,
            clip_s: 3.0,
            hop_s: 3.0,
            clipping_fraction: 0.01,
            max_upload_bytes: 64 << 20,
            preprocess: PreprocessConfig::default(),
        }
    }
}

/// Environment variables that override file settings.
pub const ENV_BIND: &str = "AUSCULT_BIND";
pub const ENV_CHECKPOINT: &str = "AUSCULT_CHECKPOINT";
pub const ENV_THRESHOLD: &str = "AUSCULT_THRESHOLD";
pub const ENV_STORAGE_DIR: &str = "AUSCULT_STORAGE_DIR";

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads `path` (defaults when `None`), then applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_toml(
                &std::fs::read_to_string(p).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?,
            )?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (k, v) in vars {
            match k.as_str() {
                ENV_BIND => self.bind = v,
                ENV_CHECKPOINT => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
                ENV_THRESHOLD => {
                    self.threshold = v
                        .parse()
                        .map_err(|_| ServiceError::Config(format!("{ENV_THRESHOLD}=`{v}` is not a number")))?
                }
                ENV_STORAGE_DIR => self.storage_dir = PathBuf::from(v),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ServiceError::Config("threshold must lie in [0, 1]".into()));
        }
        if !(self.clip_s > 0.0 && self.hop_s > 0.0) || self.min_duration_s < self.clip_s {
            return Err(ServiceError::Config(
                "clip_s and hop_s must be positive and min_duration_s at least clip_s".into(),
            ));
        }
        Ok(())
    }
}
