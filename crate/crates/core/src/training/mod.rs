//! AdamW fold training and the five-setup cross-validation harness.

mod experiment;
mod fold;
mod optim;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::ExecMode;

pub use experiment::{
    load_domain, make_splits, run_experiment, run_fold, Corpus, DomainData, ExperimentConfig,
};
pub use fold::{
    evaluate, predict_samples, train_fold, EpochLog, FoldOutcome, Sample, TrainingLog,
};
pub use optim::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached at the end of warmup.
    pub learning_rate: f64,
    /// Decoupled weight decay, applied to projection matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Linear warmup length; cosine decay to `min_learning_rate` follows.
    pub warmup_epochs: usize,
    pub min_learning_rate: f64,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Stratified share of the train fold held out for model selection.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Informational: everything here runs on the CPU.
    pub cpu_only: bool,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_epochs: 5,
            min_learning_rate: 0.0,
            class_weighting: false,
            grad_clip_norm: None,
            validation_fraction: 0.1,
            seed: 0,
            cpu_only: true,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mixstyle_enabled: bool) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 || (mixstyle_enabled && self.batch_size < 2) {
            return Err(Error::config("batch_size must be at least 1, and at least 2 with MixStyle"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.min_learning_rate < 0.0 {
            return Err(Error::config("learning rates must be positive and decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 0.5)"));
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (zero-based).
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let total = self.epochs * steps_per_epoch;
        let warm = (self.warmup_epochs * steps_per_epoch).min(total);
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        self.min_learning_rate + (self.learning_rate - self.min_learning_rate) * 0.5 * (1.0 + (PI * progress).cos())
    }
}
