//! Synthetic two-device lung-sound corpus.
//!
//! Each clip is a breath-noise bed with a breathing envelope, optional crackle
//! transients and an optional wheeze tone, rendered at the device's native rate
//! and passed through a device coloration stage last:
//!
//! - stethoscope: low-band shelf boost, gentle low-pass, faint noise floor
//! - smartphone: high-pass (small microphones lose the low band) and a strong
//!   broadband noise floor
//!
//! Every clip draws from its own generator seeded by `(seed, domain, index)`,
//! so clips can be rendered in any order, in parallel, and reproduced singly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::signal::wav::write_wav;
use crate::signal::{Biquad, DeviceDomain, LowpassDesign, RawLabel, Site};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassCounts {
    pub normal: usize,
    pub crackle: usize,
    pub wheeze: usize,
    pub both: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.normal + self.crackle + self.wheeze + self.both
    }

    fn labels(&self) -> Vec<RawLabel> {
        [
            (RawLabel::Normal, self.normal),
            (RawLabel::Crackle, self.crackle),
            (RawLabel::Wheeze, self.wheeze),
            (RawLabel::Both, self.both),
        ]
        .into_iter()
        .flat_map(|(l, n)| std::iter::repeat_n(l, n))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BreathParams {
    /// Breathing cycle length range, seconds.
    pub cycle_s: (f64, f64),
    /// Upper edge of the breath-noise band.
    pub band_hz: f64,
    /// Envelope minimum between breaths, as a fraction of the peak.
    pub envelope_floor: f64,
}

impl Default for BreathParams {
    fn default() -> Self {
        Self {
            cycle_s: (1.5, 3.0),
            band_hz: 600.0,
            envelope_floor: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrackleParams {
    /// Minimum transients per second of clip.
    pub density_per_s: f64,
    /// Exponential decay time constant range, milliseconds.
    pub decay_ms: (f64, f64),
    /// Ringing frequency range.
    pub freq_hz: (f64, f64),
    /// Peak amplitude range relative to the unit-RMS breath bed.
    pub amplitude: (f64, f64),
}

impl Default for CrackleParams {
    fn default() -> Self {
        Self {
            density_per_s: 4.0,
            decay_ms: (1.5, 4.0),
            freq_hz: (150.0, 700.0),
            amplitude: (2.0, 4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WheezeParams {
    /// Band the fundamental is drawn from.
    pub band_hz: (f64, f64),
    /// Tone power over breath power, both measured inside `band_hz`.
    pub snr_db: (f64, f64),
    /// Amplitude-modulation depth in `[0, 1)`.
    pub modulation_depth: f64,
    /// Relative pitch glide over the tone's duration.
    pub glide: f64,
    /// Fraction of the clip the tone is sounding.
    pub duty: (f64, f64),
}

impl Default for WheezeParams {
    fn default() -> Self {
        Self {
            band_hz: (200.0, 800.0),
            snr_db: (12.0, 18.0),
            modulation_depth: 0.3,
            glide: 0.1,
            duty: (0.6, 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StethoscopeParams {
    pub sample_rate_hz: u32,
    pub shelf_hz: f64,
    pub shelf_gain_db: f64,
    pub lowpass_hz: f64,
    /// Noise floor RMS relative to the colored signal RMS.
    pub noise_floor_db: f64,
}

impl Default for StethoscopeParams {
    fn default() -> Self {
        Self {
            sample_rate_hz: 4000,
            shelf_hz: 250.0,
            shelf_gain_db: 8.0,
            lowpass_hz: 1200.0,
            noise_floor_db: -40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmartphoneParams {
    pub sample_rate_hz: u32,
    pub highpass_hz: f64,
    /// Broadband noise floor RMS relative to the colored signal RMS.
    pub noise_floor_db: f64,
}

impl Default for SmartphoneParams {
    fn default() -> Self {
        Self {
            sample_rate_hz: 48_000,
            highpass_hz: 250.0,
            noise_floor_db: -4.0,
        }
    }
}

/// Everything the generator needs; readable from TOML with every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSpec {
    pub seed: u64,
    pub clip_s: f64,
    pub stethoscope: ClassCounts,
    pub smartphone: ClassCounts,
    pub breath: BreathParams,
    pub crackle: CrackleParams,
    pub wheeze: WheezeParams,
    pub stethoscope_device: StethoscopeParams,
    pub smartphone_device: SmartphoneParams,
}

impl Default for SynthesisSpec {
    /// 2000 stethoscope and 300 smartphone clips in roughly the clinical class proportions.
    fn default() -> Self {
        Self {
            seed: 7,
            clip_s: 3.0,
            stethoscope: ClassCounts {
                normal: 1068,
                crackle: 353,
                wheeze: 292,
                both: 287,
            },
            smartphone: ClassCounts {
                normal: 205,
                crackle: 42,
                wheeze: 22,
                both: 31,
            },
            breath: BreathParams::default(),
            crackle: CrackleParams::default(),
            wheeze: WheezeParams::default(),
            stethoscope_device: StethoscopeParams::default(),
            smartphone_device: SmartphoneParams::default(),
        }
    }
}

/// Manifests written by [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub stethoscope: Manifest,
    pub smartphone: Manifest,
    pub stethoscope_path: PathBuf,
    pub smartphone_path: PathBuf,
}

impl SynthCorpus {
    pub fn manifest(&self, domain: DeviceDomain) -> &Manifest {
        match domain {
            DeviceDomain::Stethoscope => &self.stethoscope,
            DeviceDomain::Smartphone => &self.smartphone,
        }
    }
}

impl SynthesisSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn with_counts(mut self, stethoscope: ClassCounts, smartphone: ClassCounts) -> Self {
        self.stethoscope = stethoscope;
        self.smartphone = smartphone;
        self
    }

    pub fn counts(&self, domain: DeviceDomain) -> ClassCounts {
        match domain {
            DeviceDomain::Stethoscope => self.stethoscope,
            DeviceDomain::Smartphone => self.smartphone,
        }
    }

    pub fn sample_rate_hz(&self, domain: DeviceDomain) -> u32 {
        match domain {
            DeviceDomain::Stethoscope => self.stethoscope_device.sample_rate_hz,
            DeviceDomain::Smartphone => self.smartphone_device.sample_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !(self.clip_s > 0.0 && self.clip_s.is_finite()) {
            return Err(Error::config("clip_s must be positive"));
        }
        if !ordered(self.breath.cycle_s) || self.breath.cycle_s.0 <= 0.0 {
            return Err(Error::config("breath.cycle_s must be a positive ordered range"));
        }
        for (name, r) in [
            ("crackle.decay_ms", self.crackle.decay_ms),
            ("crackle.freq_hz", self.crackle.freq_hz),
            ("crackle.amplitude", self.crackle.amplitude),
            ("wheeze.band_hz", self.wheeze.band_hz),
            ("wheeze.snr_db", self.wheeze.snr_db),
            ("wheeze.duty", self.wheeze.duty),
        ] {
            if !ordered(r) {
                return Err(Error::config(format!("{name} must be an ordered range")));
            }
        }
        if self.crackle.density_per_s < 0.0 || self.crackle.decay_ms.0 <= 0.0 {
            return Err(Error::config("crackle density and decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.wheeze.modulation_depth) || self.wheeze.duty.1 > 1.0 || self.wheeze.duty.0 <= 0.0 {
            return Err(Error::config("wheeze modulation depth and duty must lie in (0, 1)"));
        }
        for domain in [DeviceDomain::Stethoscope, DeviceDomain::Smartphone] {
            let nyquist = self.sample_rate_hz(domain) as f64 / 2.0;
            let top = self
                .wheeze
                .band_hz
                .1
                .max(self.crackle.freq_hz.1)
                .max(self.breath.band_hz)
                * (1.0 + self.wheeze.glide);
            if top >= nyquist {
                return Err(Error::config(format!("{domain} Nyquist {nyquist} Hz is below the synthesis bands")));
            }
        }
        if self.stethoscope_device.lowpass_hz >= self.stethoscope_device.sample_rate_hz as f64 / 2.0 {
            return Err(Error::config("stethoscope low-pass above Nyquist"));
        }
        if self.smartphone_device.highpass_hz >= self.smartphone_device.sample_rate_hz as f64 / 2.0 {
            return Err(Error::config("smartphone high-pass above Nyquist"));
        }
        Ok(())
    }

    /// Renders one clip, coloration included, peak-scaled into `[-1, 1]`.
    pub fn render_clip(&self, domain: DeviceDomain, label: RawLabel, index: usize) -> Vec<f64> {
        let rate = self.sample_rate_hz(domain) as f64;
        let n = (self.clip_s * rate).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(self.seed, domain, index));

        let mut x = breath_bed(&self.breath, n, rate, &mut rng);
        if matches!(label, RawLabel::Wheeze | RawLabel::Both) {
            let tone = wheeze_tone(&self.wheeze, n, rate, &mut rng);
            let band = self.wheeze.band_hz;
            let noise_band = band_power(&x, rate, band.0, band.1);
            let tone_power = band_power(&tone, rate, band.0, band.1);
            let snr = rng.random_range(self.wheeze.snr_db.0..=self.wheeze.snr_db.1);
            let gain = (noise_band * 10f64.powf(snr / 10.0) / tone_power.max(1e-300)).sqrt();
            x.iter_mut().zip(&tone).for_each(|(a, t)| *a += gain * t);
        }
        if matches!(label, RawLabel::Crackle | RawLabel::Both) {
            add_crackles(&self.crackle, &mut x, self.clip_s, rate, &mut rng);
        }

        match domain {
            DeviceDomain::Stethoscope => {
                let d = &self.stethoscope_device;
                Biquad::low_shelf(d.shelf_hz, rate, d.shelf_gain_db).apply(&mut x);
                let lp = LowpassDesign::butterworth(2, d.lowpass_hz, rate).expect("validated");
                lp.sections.iter().for_each(|s| s.apply(&mut x));
                add_noise_floor(&mut x, d.noise_floor_db, &mut rng);
            }
            DeviceDomain::Smartphone => {
                let d = &self.smartphone_device;
                for q in [0.541_196_100_146_197, 1.306_562_964_876_376_5] {
                    Biquad::highpass(d.highpass_hz, rate, q).apply(&mut x);
                }
                add_noise_floor(&mut x, d.noise_floor_db, &mut rng);
            }
        }

        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let level = rng.random_range(0.3..0.9);
        if peak > 0.0 {
            x.iter_mut().for_each(|v| *v *= level / peak);
        }
        x
    }
}

fn clip_seed(seed: u64, domain: DeviceDomain, index: usize) -> u64 {
    // splitmix64 finalizer over the packed key
    let tag = match domain {
        DeviceDomain::Stethoscope => 1u64,
        DeviceDomain::Smartphone => 2u64,
    };
    let mut z = seed ^ (tag << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Band-limited noise at unit RMS under a breathing envelope.
fn breath_bed(p: &BreathParams, n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = gaussian(n, rng);
    let lp = LowpassDesign::butterworth(4, p.band_hz, rate).expect("validated");
    lp.sections.iter().for_each(|s| s.apply(&mut x));
    let r = rms(&x).max(1e-300);
    let cycle = rng.random_range(p.cycle_s.0..=p.cycle_s.1);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for (i, v) in x.iter_mut().enumerate() {
        let s = (std::f64::consts::TAU * i as f64 / (rate * cycle) + phase).sin().max(0.0);
        *v *= (p.envelope_floor + (1.0 - p.envelope_floor) * s * s) / r;
    }
    x
}

fn wheeze_tone(p: &WheezeParams, n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hi = p.band_hz.1 / (1.0 + p.glide);
    let f0 = rng.random_range(p.band_hz.0..=hi.max(p.band_hz.0));
    let glide = rng.random_range(0.0..=p.glide);
    let fm = rng.random_range(2.0..6.0);
    let duty = rng.random_range(p.duty.0..=p.duty.1);
    let len = ((n as f64) * duty) as usize;
    let start = rng.random_range(0..=n - len);
    let ramp = (0.05 * rate) as usize;
    let mut phase = 0.0;
    let mut out = vec![0.0; n];
    for k in 0..len {
        let t = k as f64 / rate;
        let f = f0 * (1.0 + glide * k as f64 / len.max(1) as f64);
        phase += std::f64::consts::TAU * f / rate;
        let am = 1.0 + p.modulation_depth * (std::f64::consts::TAU * fm * t).sin();
        let edge = (k.min(len - 1 - k) as f64 / ramp.max(1) as f64).min(1.0);
        out[start + k] = edge * am * phase.sin();
    }
    out
}

fn add_crackles(p: &CrackleParams, x: &mut [f64], clip_s: f64, rate: f64, rng: &mut ChaCha8Rng) {
    let base = (p.density_per_s * clip_s).ceil() as usize;
    let count = base + rng.random_range(0..=base / 2);
    for _ in 0..count {
        let tau = rng.random_range(p.decay_ms.0..=p.decay_ms.1) * 1e-3;
        let f = rng.random_range(p.freq_hz.0..=p.freq_hz.1);
        let amp = rng.random_range(p.amplitude.0..=p.amplitude.1) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let len = ((6.0 * tau * rate) as usize).max(1);
        let start = rng.random_range(0..x.len().saturating_sub(len).max(1));
        for (k, v) in x[start..].iter_mut().take(len).enumerate() {
            let t = k as f64 / rate;
            *v += amp * (-t / tau).exp() * (std::f64::consts::TAU * f * t).cos();
        }
    }
}

fn add_noise_floor(x: &mut [f64], db: f64, rng: &mut ChaCha8Rng) {
    let level = rms(x) * 10f64.powf(db / 20.0);
    for v in x.iter_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v += level * g;
    }
}

/// Mean periodogram power in `[lo_hz, hi_hz]`, summed over bins.
pub fn band_power(x: &[f64], rate: f64, lo_hz: f64, hi_hz: f64) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..=n / 2)
        .filter(|&k| {
            let f = k as f64 * rate / n as f64;
            f >= lo_hz && f <= hi_hz
        })
        .map(|k| buf[k].norm_sqr())
        .sum::<f64>()
        / (n as f64 * n as f64)
}

fn domain_dir(domain: DeviceDomain) -> &'static str {
    match domain {
        DeviceDomain::Stethoscope => "stethoscope",
        DeviceDomain::Smartphone => "smartphone",
    }
}

fn generate_domain(spec: &SynthesisSpec, domain: DeviceDomain, out_dir: &Path, exec: ExecMode) -> Result<Manifest> {
    let mut labels = spec.counts(domain).labels();
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(spec.seed, domain, usize::MAX));
    labels.shuffle(&mut rng);
    let dir = domain_dir(domain);
    if !labels.is_empty() {
        std::fs::create_dir_all(out_dir.join("wav").join(dir))?;
    }
    let rate = spec.sample_rate_hz(domain);
    let prefix = if domain == DeviceDomain::Stethoscope { "S" } else { "P" };
    let indexed: Vec<(usize, RawLabel)> = labels.into_iter().enumerate().collect();
    let entries = par::try_map(exec, &indexed, |&(i, label)| -> Result<ManifestEntry> {
        let rel = format!("wav/{dir}/{prefix}{i:05}.wav");
        let samples = spec.render_clip(domain, label, i);
        write_wav(out_dir.join(&rel), &samples, rate)?;
        let site = Site::RECORDING_ORDER[i % 4];
        Ok(ManifestEntry::new(rel, domain, site, label, format!("{prefix}{:04}", i / 4), rate))
    })?;
    let mut m = Manifest::new(
        entries,
        format!(
            "synthetic {dir} corpus, seed {}, {} s clips at {rate} Hz",
            spec.seed, spec.clip_s
        ),
    )?;
    m.base_dir = out_dir.to_path_buf();
    Ok(m)
}

/// Writes `stethoscope.tsv`, `smartphone.tsv` and `wav/<domain>/*.wav` under `out_dir`.
pub fn synth_generate(spec: &SynthesisSpec, out_dir: impl AsRef<Path>) -> Result<SynthCorpus> {
    synth_generate_with(spec, out_dir, ExecMode::default())
}

pub fn synth_generate_with(spec: &SynthesisSpec, out_dir: impl AsRef<Path>, exec: ExecMode) -> Result<SynthCorpus> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let stethoscope = generate_domain(spec, DeviceDomain::Stethoscope, out_dir, exec)?;
    let smartphone = generate_domain(spec, DeviceDomain::Smartphone, out_dir, exec)?;
    let stethoscope_path = out_dir.join("stethoscope.tsv");
    let smartphone_path = out_dir.join("smartphone.tsv");
    stethoscope.save(&stethoscope_path)?;
    smartphone.save(&smartphone_path)?;
    Ok(SynthCorpus {
        stethoscope,
        smartphone,
        stethoscope_path,
        smartphone_path,
    })
}
