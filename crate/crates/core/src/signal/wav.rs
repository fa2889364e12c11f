//! PCM WAV reading and writing.
//!
//! Integer and float PCM are accepted; multi-channel input is mixed to mono by
//! arithmetic mean. Output is always single-channel 16-bit PCM.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Decoded mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct MonoPcm {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    /// Channel count of the source before down-mixing.
    pub source_channels: u16,
}

fn decode<R: Read + Seek>(reader: WavReader<R>) -> Result<MonoPcm> {
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Audio(format!(
                    "unsupported float width {} bits",
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(e.to_string()))?
        }
        SampleFormat::Int => {
            let full_scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(e.to_string()))?
        }
    };
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(MonoPcm {
        samples,
        sample_rate_hz: spec.sample_rate,
        source_channels: spec.channels,
    })
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MonoPcm> {
    let path = path.as_ref();
    let reader = WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    decode(reader)
}

pub fn decode_wav_bytes(bytes: &[u8]) -> Result<MonoPcm> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Audio(e.to_string()))?;
    decode(reader)
}

fn to_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16
}

fn mono16(rate: u32) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

pub fn encode_wav_bytes(samples: &[f64], sample_rate_hz: u32) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::with_capacity(44 + samples.len() * 2));
    {
        let mut w = WavWriter::new(&mut buf, mono16(sample_rate_hz))
            .map_err(|e| Error::Audio(e.to_string()))?;
        for &s in samples {
            w.write_sample(to_i16(s)).map_err(|e| Error::Audio(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Audio(e.to_string()))?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate_hz: u32) -> Result<()> {
    let bytes = encode_wav_bytes(samples, sample_rate_hz)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
