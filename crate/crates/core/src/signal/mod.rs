//! Waveform-level preprocessing.
//!
//! Recordings from both devices are mapped onto a common 4 kHz representation:
//! zero-phase low-pass at the native rate, windowed-sinc resampling, and peak
//! normalization. [`segment`] cuts long app recordings into the clip length the
//! model was trained on.

mod filter;
mod resample;
pub mod wav;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{lowpass_filter, lowpass_samples, Biquad, LowpassDesign};
pub use resample::{resample, resample_samples, ResamplerConfig};

/// Sample rate every recording is brought to before feature extraction.
pub const CANONICAL_RATE_HZ: u32 = 4000;
pub const DEFAULT_CUTOFF_HZ: f64 = 1800.0;
pub const DEFAULT_CLIP_S: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceDomain {
    Stethoscope,
    Smartphone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "RUL")]
    Rul,
    #[serde(rename = "LUL")]
    Lul,
    #[serde(rename = "RLL")]
    Rll,
    #[serde(rename = "LLL")]
    Lll,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Site {
    /// The four auscultation sites, in the order the app guides the user through them.
    pub const RECORDING_ORDER: [Site; 4] = [Site::Rul, Site::Lul, Site::Lll, Site::Rll];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawLabel {
    Normal,
    Crackle,
    Wheeze,
    Both,
    Unlabeled,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(<$ty>::$variant => $text),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(<$ty>::$variant),)+
                    other => Err(Error::invalid(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(DeviceDomain { Stethoscope => "stethoscope", Smartphone => "smartphone" });
text_enum!(Site { Rul => "RUL", Lul => "LUL", Rll => "RLL", Lll => "LLL", Unknown => "unknown" });
text_enum!(RawLabel {
    Normal => "normal",
    Crackle => "crackle",
    Wheeze => "wheeze",
    Both => "both",
    Unlabeled => "unlabeled",
});

/// A mono waveform plus the provenance needed for splitting and domain mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioRecording {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub device_domain: DeviceDomain,
    pub site: Site,
    pub raw_label: RawLabel,
    pub patient_id: String,
}

impl AudioRecording {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, device_domain: DeviceDomain) -> Self {
        Self {
            samples,
            sample_rate_hz,
            device_domain,
            site: Site::Unknown,
            raw_label: RawLabel::Unlabeled,
            patient_id: String::new(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same metadata, new samples and rate.
    pub fn with_samples(&self, samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
            device_domain: self.device_domain,
            site: self.site,
            raw_label: self.raw_label,
            patient_id: self.patient_id.clone(),
        }
    }

    pub(crate) fn check_usable(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("recording has no samples"));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }
}

/// Cuts `rec` into clips of `window_s` seconds every `hop_s` seconds.
///
/// A recording shorter than one window yields an empty list.
pub fn segment(rec: &AudioRecording, window_s: f64, hop_s: f64) -> Result<Vec<AudioRecording>> {
    if !(window_s > 0.0) || !(hop_s > 0.0) {
        return Err(Error::invalid("window and hop must be positive"));
    }
    let rate = rec.sample_rate_hz as f64;
    let win = (window_s * rate).round() as usize;
    let hop = ((hop_s * rate).round() as usize).max(1);
    if win == 0 || win > rec.samples.len() {
        return Ok(Vec::new());
    }
    let count = (rec.samples.len() - win) / hop + 1;
    Ok((0..count)
        .map(|k| rec.with_samples(rec.samples[k * hop..k * hop + win].to_vec(), rec.sample_rate_hz))
        .collect())
}

/// Scales so the peak magnitude is exactly one. All-zero input is returned unchanged.
pub fn normalize_amplitude(rec: &AudioRecording) -> AudioRecording {
    let peak = rec.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return rec.clone();
    }
    let samples = rec.samples.iter().map(|s| s / peak).collect();
    rec.with_samples(samples, rec.sample_rate_hz)
}

/// Settings for the canonical preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_rate_hz: u32,
    pub cutoff_hz: f64,
    pub resampler_taps: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: CANONICAL_RATE_HZ,
            cutoff_hz: DEFAULT_CUTOFF_HZ,
            resampler_taps: ResamplerConfig::default().taps,
        }
    }
}

/// Canonical chain: low-pass at the native rate, resample, peak-normalize.
///
/// The filter runs first so that it also serves as the anti-aliasing stage.
/// If the native Nyquist is already at or below the cutoff, filtering is skipped.
pub fn preprocess(rec: &AudioRecording, cfg: &PreprocessConfig) -> Result<AudioRecording> {
    rec.check_usable()?;
    let nyquist = rec.sample_rate_hz as f64 / 2.0;
    let filtered = if cfg.cutoff_hz < nyquist {
        lowpass_filter(rec, cfg.cutoff_hz)?
    } else {
        rec.clone()
    };
    let resampled = resample(
        &filtered,
        cfg.target_rate_hz,
        &ResamplerConfig {
            taps: cfg.resampler_taps,
            ..ResamplerConfig::default()
        },
    )?;
    Ok(normalize_amplitude(&resampled))
}
