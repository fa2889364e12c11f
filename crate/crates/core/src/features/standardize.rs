use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::error::{Error, Result};

/// Frozen global mean/std computed on a training set and replayed at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
    /// Set when the fitted data had zero variance and `std` was forced to one.
    pub degenerate: bool,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization {
        mean: 0.0,
        std: 1.0,
        degenerate: false,
    };

    pub fn apply(&self, values: &Array2<f32>) -> Array2<f32> {
        values.mapv(|v| ((v as f64 - self.mean) / self.std) as f32)
    }

    pub fn apply_spectrogram(&self, spec: &Spectrogram) -> Spectrogram {
        Spectrogram {
            values: self.apply(&spec.values),
            ..spec.clone()
        }
    }
}

/// Fits a single global mean and population standard deviation over every cell
/// of every spectrogram.
pub fn dataset_standardize<'a, I>(specs: I) -> Result<Standardization>
where
    I: IntoIterator<Item = &'a Spectrogram>,
{
    let mut count = 0usize;
    let mut sum = 0.0f64;
    let specs: Vec<&Spectrogram> = specs.into_iter().collect();
    for s in &specs {
        count += s.values.len();
        sum += s.values.iter().map(|&v| v as f64).sum::<f64>();
    }
    if count == 0 {
        return Err(Error::invalid("cannot standardize an empty collection"));
    }
    let mean = sum / count as f64;
    // Two-pass variance.
    let var = specs
        .iter()
        .flat_map(|s| s.values.iter())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    let std = var.sqrt();
    if !(std > 1e-12) {
        warn!("zero-variance training features; standardizing with std = 1");
        return Ok(Standardization {
            mean,
            std: 1.0,
            degenerate: true,
        });
    }
    Ok(Standardization {
        mean,
        std,
        degenerate: false,
    })
}
