//! Lung-sound assessment workbench.
//!
//! Pipeline, in module order:
//!
//! - [`signal`]: resampling, zero-phase low-pass, segmentation, WAV I/O
//! - [`features`]: log-mel spectrograms, patch grids, dataset standardization
//! - [`model`]: spectrogram transformer with frequency-axis MixStyle, exact backprop
//! - [`datasets`]: manifests, binary labels, stratified folds, experiment setups, synthetic corpus
//! - [`training`]: AdamW loop, fold training, five-setup experiments
//! - [`metrics`]: sensitivity / specificity / Score / F1 and fold aggregation

pub mod datasets;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod par;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
