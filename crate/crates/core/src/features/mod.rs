//! Log-mel spectrograms and the patch grid fed to the transformer.

mod container;
mod patch;
mod standardize;

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{AudioRecording, CANONICAL_RATE_HZ};

pub use container::{decode_spectrogram, encode_spectrogram, read_spectrogram, write_spectrogram};
pub use patch::{patchify, unpatchify, PatchGrid};
pub use standardize::{dataset_standardize, Standardization};

/// Front-end parameters: STFT, mel filter bank, log compression and patching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub window_s: f64,
    pub hop_s: f64,
    /// FFT size; the analysis window is zero-padded up to this length.
    pub n_fft: usize,
    /// Power floor applied before the natural log.
    pub log_floor: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_f: usize,
    pub stride_t: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: CANONICAL_RATE_HZ,
            n_mels: 64,
            f_min_hz: 0.0,
            f_max_hz: 2000.0,
            window_s: 0.025,
            hop_s: 0.010,
            n_fft: 512,
            log_floor: 1e-10,
            patch_h: 16,
            patch_w: 16,
            stride_f: 10,
            stride_t: 10,
        }
    }
}

impl FeatureConfig {
    /// Coarser time resolution and non-overlapping patches: 20 tokens per 3 s
    /// clip instead of 145. Used for CPU-budget experiments.
    pub fn compact() -> Self {
        Self {
            window_s: 0.064,
            hop_s: 0.032,
            stride_f: 16,
            stride_t: 16,
            ..Self::default()
        }
    }

    pub fn win_length(&self) -> usize {
        (self.window_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.hop_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn frames_for(&self, n_samples: usize) -> Option<usize> {
        let win = self.win_length();
        (n_samples >= win).then(|| (n_samples - win) / self.hop_length() + 1)
    }

    /// Patch grid (rows along frequency, cols along time) for a clip of `n_samples`.
    pub fn grid_for(&self, n_samples: usize) -> Option<(usize, usize)> {
        let frames = self.frames_for(n_samples)?;
        if self.n_mels < self.patch_h || frames < self.patch_w {
            return None;
        }
        Some((
            (self.n_mels - self.patch_h) / self.stride_f + 1,
            (frames - self.patch_w) / self.stride_t + 1,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.win_length();
        if self.sample_rate_hz == 0 || self.n_mels == 0 || win == 0 || self.hop_length() == 0 {
            return Err(Error::config("feature sizes must be positive"));
        }
        if self.n_fft < win {
            return Err(Error::config(format!(
                "n_fft {} shorter than the analysis window {win}",
                self.n_fft
            )));
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz)
            || self.f_max_hz > self.sample_rate_hz as f64 / 2.0
        {
            return Err(Error::config("mel range must satisfy 0 <= f_min < f_max <= Nyquist"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log floor must be positive"));
        }
        if self.patch_h == 0 || self.patch_w == 0 || self.stride_f == 0 || self.stride_t == 0 {
            return Err(Error::config("patch sizes and strides must be positive"));
        }
        Ok(())
    }
}

/// Log-mel magnitude, `n_mels × frames`, frequency ascending down the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f32>,
    pub freq_range_hz: (f32, f32),
    pub frame_hop_s: f32,
}

impl Spectrogram {
    pub fn mel_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies of the triangular mel filters.
pub fn mel_center_frequencies(cfg: &FeatureConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filter bank, `n_mels × (n_fft/2 + 1)`, unit peak.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= l || f >= r {
            0.0
        } else if f <= c {
            (f - l) / (c - l)
        } else {
            (r - f) / (r - c)
        }
    })
}

/// Reusable STFT + mel projection for one [`FeatureConfig`].
pub struct MelExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: Array2<f64>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.win_length();
        // Periodic Hann.
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos())
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            window,
            bank: mel_filterbank(cfg),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn extract(&self, clip: &AudioRecording) -> Result<Spectrogram> {
        if clip.sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(Error::invalid(format!(
                "clip at {} Hz, features expect {} Hz",
                clip.sample_rate_hz, self.cfg.sample_rate_hz
            )));
        }
        self.extract_samples(&clip.samples)
    }

    pub fn extract_samples(&self, samples: &[f64]) -> Result<Spectrogram> {
        let cfg = &self.cfg;
        let (win, hop) = (cfg.win_length(), cfg.hop_length());
        let frames = cfg.frames_for(samples.len()).ok_or_else(|| {
            Error::invalid(format!(
                "clip of {} samples is shorter than one {win}-sample window",
                samples.len()
            ))
        })?;
        let bins = cfg.n_fft / 2 + 1;
        let floor = cfg.log_floor;
        let mut values = Array2::<f32>::zeros((cfg.n_mels, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; bins];
        for t in 0..frames {
            let frame = &samples[t * hop..t * hop + win];
            for (slot, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(s * w, 0.0);
            }
            buf[win..].iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            for m in 0..cfg.n_mels {
                let e: f64 = self
                    .bank
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                values[(m, t)] = e.max(floor).ln() as f32;
            }
        }
        Ok(Spectrogram {
            values,
            freq_range_hz: (cfg.f_min_hz as f32, cfg.f_max_hz as f32),
            frame_hop_s: hop as f32 / cfg.sample_rate_hz as f32,
        })
    }
}

/// One-shot convenience over [`MelExtractor`].
pub fn log_mel_spectrogram(clip: &AudioRecording, cfg: &FeatureConfig) -> Result<Spectrogram> {
    MelExtractor::new(cfg)?.extract(clip)
}
