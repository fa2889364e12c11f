use std::f64::consts::PI;

use super::AudioRecording;
use crate::error::{Error, Result};

/// One second-order section in transposed direct form II, normalized so `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn lowpass(cutoff_hz: f64, sample_rate_hz: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / sample_rate_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 - cos) / a0;
        Biquad {
            b: [b1 / 2.0, b1, b1 / 2.0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn highpass(cutoff_hz: f64, sample_rate_hz: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / sample_rate_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 + cos) / a0;
        Biquad {
            b: [b1 / 2.0, -b1, b1 / 2.0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    /// Shelving boost (or cut) of `gain_db` below `corner_hz`, unity gain above.
    pub fn low_shelf(corner_hz: f64, sample_rate_hz: f64, gain_db: f64) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * PI * corner_hz / sample_rate_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / 2.0 * std::f64::consts::SQRT_2;
        let sq = 2.0 * a.sqrt() * alpha;
        let a0 = (a + 1.0) + (a - 1.0) * cos + sq;
        Biquad {
            b: [
                a * ((a + 1.0) - (a - 1.0) * cos + sq) / a0,
                2.0 * a * ((a - 1.0) - (a + 1.0) * cos) / a0,
                a * ((a + 1.0) - (a - 1.0) * cos - sq) / a0,
            ],
            a: [
                -2.0 * ((a - 1.0) + (a + 1.0) * cos) / a0,
                ((a + 1.0) + (a - 1.0) * cos - sq) / a0,
            ],
        }
    }

    /// Causal single pass, in place.
    pub fn apply(&self, x: &mut [f64]) {
        self.run(x);
    }

    fn dc_gain(&self) -> f64 {
        let den = 1.0 + self.a[0] + self.a[1];
        if den.abs() < 1e-300 {
            return 0.0;
        }
        (self.b[0] + self.b[1] + self.b[2]) / den
    }

    /// Runs the section in place, starting from the steady state for a constant
    /// input equal to `x[0]` so that a DC signal passes without a start-up transient.
    fn run(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let g = self.dc_gain();
        let mut z2 = (self.b[2] - self.a[1] * g) * first;
        let mut z1 = (g - self.b[0]) * first;
        for s in x.iter_mut() {
            let xin = *s;
            let y = self.b[0] * xin + z1;
            z1 = self.b[1] * xin - self.a[0] * y + z2;
            z2 = self.b[2] * xin - self.a[1] * y;
            *s = y;
        }
    }

    /// Complex frequency response magnitude at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, self.b[1] * s1 + self.b[2] * s2);
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// A Butterworth low-pass as a cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct LowpassDesign {
    pub sections: Vec<Biquad>,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
}

impl LowpassDesign {
    /// Butterworth design of even `order` via the bilinear transform (prewarped at the cutoff).
    pub fn butterworth(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        let nyquist = sample_rate_hz / 2.0;
        if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
            return Err(Error::InvalidCutoff {
                cutoff_hz,
                nyquist_hz: nyquist,
            });
        }
        if order == 0 || order % 2 != 0 {
            return Err(Error::config(format!("filter order must be even and positive, got {order}")));
        }
        let sections = (0..order / 2)
            .map(|k| {
                let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
                Biquad::lowpass(cutoff_hz, sample_rate_hz, 1.0 / (2.0 * theta.cos()))
            })
            .collect();
        Ok(Self {
            sections,
            cutoff_hz,
            sample_rate_hz,
        })
    }

    /// Single-pass magnitude response; the zero-phase application squares it.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.sections
            .iter()
            .map(|s| s.magnitude(freq_hz, self.sample_rate_hz))
            .product()
    }

    fn run(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x);
        }
    }

    /// Forward-backward application with odd-symmetric edge extension.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        // Settling length: a few time constants of the cutoff, bounded by the input.
        let settle = ((6.0 * self.sample_rate_hz / self.cutoff_hz).ceil() as usize).max(12);
        let pad = settle.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Default order of the preprocessing low-pass.
pub const LOWPASS_ORDER: usize = 4;

pub fn lowpass_samples(samples: &[f64], sample_rate_hz: u32, cutoff_hz: f64) -> Result<Vec<f64>> {
    let design = LowpassDesign::butterworth(LOWPASS_ORDER, cutoff_hz, sample_rate_hz as f64)?;
    Ok(design.filtfilt(samples))
}

/// Zero-phase 4th-order Butterworth low-pass.
pub fn lowpass_filter(rec: &AudioRecording, cutoff_hz: f64) -> Result<AudioRecording> {
    let nyquist = rec.sample_rate_hz as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::InvalidCutoff {
            cutoff_hz,
            nyquist_hz: nyquist,
        });
    }
    rec.check_usable()?;
    let out = lowpass_samples(&rec.samples, rec.sample_rate_hz, cutoff_hz)?;
    Ok(rec.with_samples(out, rec.sample_rate_hz))
}
