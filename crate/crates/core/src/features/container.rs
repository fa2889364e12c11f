//! Binary spectrogram cache: fixed header followed by row-major little-endian `f32`s.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "LMSPEC01"
//! 8       4     u32 mel bins (rows)
//! 12      4     u32 frames (cols)
//! 16      4     f32 low edge Hz
//! 20      4     f32 high edge Hz
//! 24      4     f32 frame hop seconds
//! 28      4*R*C f32 values
//! ```

use std::path::Path;

use ndarray::Array2;

use super::Spectrogram;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LMSPEC01";
const HEADER: usize = 28;

pub fn encode_spectrogram(spec: &Spectrogram) -> Vec<u8> {
    let (rows, cols) = spec.values.dim();
    let mut out = Vec::with_capacity(HEADER + 4 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&spec.freq_range_hz.0.to_le_bytes());
    out.extend_from_slice(&spec.freq_range_hz.1.to_le_bytes());
    out.extend_from_slice(&spec.frame_hop_s.to_le_bytes());
    for v in spec.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_spectrogram(bytes: &[u8]) -> Result<Spectrogram> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(Error::invalid("not a spectrogram container"));
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    let expected = HEADER + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::invalid(format!(
            "spectrogram container is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f32> = (0..rows * cols).map(|i| f32_at(bytes, HEADER + 4 * i)).collect();
    Ok(Spectrogram {
        values: Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::invalid(e.to_string()))?,
        freq_range_hz: (f32_at(bytes, 16), f32_at(bytes, 20)),
        frame_hop_s: f32_at(bytes, 24),
    })
}

pub fn write_spectrogram(path: impl AsRef<Path>, spec: &Spectrogram) -> Result<()> {
    std::fs::write(path, encode_spectrogram(spec))?;
    Ok(())
}

pub fn read_spectrogram(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let path = path.as_ref();
    decode_spectrogram(&std::fs::read(path)?)
        .map_err(|e| Error::format(path, e.to_string()))
}
