//! Spectrogram transformer with a frequency-axis MixStyle block.
//!
//! The network is written out by hand (forward and exact reverse-mode
//! gradients) and is generic over [`Real`] so the same code trains in `f32`
//! and is gradient-checked in `f64`.

pub mod checkpoint;
mod mixstyle;
mod network;
mod ops;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;

pub use mixstyle::{
    frequency_stats, mix_with_plan, mixstyle_apply, mixstyle_spectrograms, plan_mixing,
    BatchFeatures, MixPlan, SliceStats,
};
pub use network::{
    classify, cross_entropy, softmax2, BatchOutput, ClassProbs, ForwardOptions, Transformer,
};
pub use params::{Block, LayerNorm, Linear, Weights};

/// Floating-point element type the network can run in.
pub trait Real: NdFloat + FromPrimitive + Default + Sum + Debug + Display {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Where domain-statistics mixing is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixLevel {
    /// On token features after patch + position embedding, at each insertion depth.
    #[default]
    Tokens,
    /// On the standardized spectrogram (per frame, over mel bins) before patching.
    Spectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixStyleConfig {
    /// Beta(alpha, alpha) shape for the mixing weight.
    pub alpha: f64,
    /// Probability that a given insertion fires on a given batch.
    pub p: f64,
    /// Encoder layers before which mixing is applied.
    pub insertion_depths: Vec<usize>,
    /// Optional `[start, end)` epoch window per insertion; `None` means every epoch.
    pub epoch_windows: Vec<Option<(usize, usize)>>,
    /// Variance floor inside the square root of the slice statistics.
    pub epsilon: f64,
    pub level: MixLevel,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            p: 0.5,
            insertion_depths: vec![0, 3],
            epoch_windows: Vec::new(),
            epsilon: 1e-6,
            level: MixLevel::Tokens,
        }
    }
}

impl MixStyleConfig {
    /// Mixing switched off entirely (no insertions, `p = 0`).
    pub fn disabled() -> Self {
        Self {
            p: 0.0,
            insertion_depths: Vec::new(),
            ..Self::default()
        }
    }

    /// Reads "early and mid training" as two epoch windows at the first layer
    /// instead of two network depths.
    pub fn epoch_reading(total_epochs: usize) -> Self {
        let third = (total_epochs / 3).max(1);
        Self {
            insertion_depths: vec![0, 0],
            epoch_windows: vec![Some((0, third)), Some((third, 2 * third))],
            ..Self::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.p > 0.0
    }

    /// Insertion indices (into `insertion_depths`) active at `depth` during `epoch`.
    pub fn active_at(&self, depth: usize, epoch: usize) -> impl Iterator<Item = usize> + '_ {
        self.insertion_depths
            .iter()
            .enumerate()
            .filter(move |&(k, &d)| {
                d == depth
                    && match self.epoch_windows.get(k).copied().flatten() {
                        Some((start, end)) => (start..end).contains(&epoch),
                        None => true,
                    }
            })
            .map(|(k, _)| k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub dropout: f64,
    /// Flattened patch length (`patch_h * patch_w`).
    pub patch_dim: usize,
    /// Patch grid (rows along frequency, cols along time).
    pub grid: (usize, usize),
    pub mixstyle: MixStyleConfig,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let features = FeatureConfig::default();
        Self {
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 2,
            dropout: 0.0,
            patch_dim: features.patch_dim(),
            grid: features.grid_for(12_000).expect("default grid"),
            mixstyle: MixStyleConfig::default(),
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Model sized to the patch grid `features` produces for clips of `clip_samples`.
    pub fn for_features(features: &FeatureConfig, clip_samples: usize) -> Result<Self> {
        let grid = features
            .grid_for(clip_samples)
            .ok_or_else(|| Error::config("clip too short for one patch"))?;
        Ok(Self {
            patch_dim: features.patch_dim(),
            grid,
            ..Self::default()
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.patch_dim == 0 || self.num_patches() == 0 {
            return Err(Error::config("empty patch grid"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        let m = &self.mixstyle;
        if !(0.0..=1.0).contains(&m.p) {
            return Err(Error::config("mixstyle p must lie in [0, 1]"));
        }
        if !(m.alpha > 0.0) || !(m.epsilon > 0.0) {
            return Err(Error::config("mixstyle alpha and epsilon must be positive"));
        }
        if let Some(&d) = m.insertion_depths.iter().find(|&&d| d >= self.num_layers) {
            return Err(Error::config(format!(
                "mixstyle depth {d} outside [0, {})",
                self.num_layers
            )));
        }
        if !m.epoch_windows.is_empty() && m.epoch_windows.len() != m.insertion_depths.len() {
            return Err(Error::config("epoch_windows must align with insertion_depths"));
        }
        Ok(())
    }
}
