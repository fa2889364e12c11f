use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::AudioRecording;
use crate::error::{Error, Result};

/// Windowed-sinc polyphase resampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResamplerConfig {
    /// Kernel length in zero crossings of the band-limiting sinc, measured at the
    /// lower of the two rates. Longer kernels give a narrower transition band.
    pub taps: usize,
    /// Kaiser window shape parameter.
    pub kaiser_beta: f64,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            taps: 64,
            kaiser_beta: 8.6,
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Polyphase filter bank for an `up / down` rational rate change.
struct PolyphaseBank {
    up: usize,
    down: usize,
    /// Number of input samples each side of the centre that a phase touches.
    half: usize,
    /// `phases[p][k]` weights input sample `base - half + k` for phase `p`.
    phases: Vec<Vec<f64>>,
}

impl PolyphaseBank {
    fn new(up: usize, down: usize, cfg: &ResamplerConfig) -> Self {
        // Cutoff relative to the input Nyquist.
        let scale = (up as f64 / down as f64).min(1.0);
        let half_zero_crossings = (cfg.taps.max(2) / 2) as f64;
        let support = half_zero_crossings / scale;
        let half = support.ceil() as usize;
        let i0_beta = bessel_i0(cfg.kaiser_beta);

        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut w: Vec<f64> = (0..=2 * half)
                    .map(|k| {
                        // Distance from the output instant to input sample `base - half + k`.
                        let t = frac + half as f64 - k as f64;
                        if t.abs() >= support {
                            return 0.0;
                        }
                        let r = t / support;
                        let win = bessel_i0(cfg.kaiser_beta * (1.0 - r * r).sqrt()) / i0_beta;
                        scale * sinc(scale * t) * win
                    })
                    .collect();
                // Unit DC gain per phase.
                let sum: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= sum);
                w
            })
            .collect();
        Self {
            up,
            down,
            half,
            phases,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let out_len = (n * self.up).div_ceil(self.down);
        let at = |i: isize| -> f64 {
            // Symmetric (whole-sample) reflection keeps DC and smooth signals intact at the edges.
            let last = n as isize - 1;
            let mut i = i;
            if last == 0 {
                return x[0];
            }
            let period = 2 * last;
            i = i.rem_euclid(period);
            if i > last {
                i = period - i;
            }
            x[i as usize]
        };
        (0..out_len)
            .map(|m| {
                let pos = m * self.down;
                let base = (pos / self.up) as isize;
                let phase = &self.phases[pos % self.up];
                let start = base - self.half as isize;
                if start >= 0 && (start as usize + phase.len()) <= n {
                    let s = start as usize;
                    phase.iter().zip(&x[s..s + phase.len()]).map(|(w, v)| w * v).sum()
                } else {
                    phase
                        .iter()
                        .enumerate()
                        .map(|(k, w)| w * at(start + k as isize))
                        .sum()
                }
            })
            .collect()
    }
}

pub fn resample_samples(
    samples: &[f64],
    from_hz: u32,
    to_hz: u32,
    cfg: &ResamplerConfig,
) -> Result<Vec<f64>> {
    if from_hz == 0 || to_hz == 0 {
        return Err(Error::invalid("sample rates must be positive"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("cannot resample an empty signal"));
    }
    if from_hz == to_hz {
        return Ok(samples.to_vec());
    }
    let g = gcd(from_hz as u64, to_hz as u64);
    let up = (to_hz as u64 / g) as usize;
    let down = (from_hz as u64 / g) as usize;
    Ok(PolyphaseBank::new(up, down, cfg).apply(samples))
}

/// Band-limited rate conversion; anti-aliasing is built into the kernel when downsampling.
pub fn resample(
    rec: &AudioRecording,
    target_rate_hz: u32,
    cfg: &ResamplerConfig,
) -> Result<AudioRecording> {
    if target_rate_hz == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    rec.check_usable()?;
    let out = resample_samples(&rec.samples, rec.sample_rate_hz, target_rate_hz, cfg)?;
    Ok(rec.with_samples(out, target_rate_hz))
}
