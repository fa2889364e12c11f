use std::path::{Path, PathBuf};

use log::{debug, info};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig};
use crate::datasets::BinaryLabel;
use crate::error::{Error, Result};
use crate::features::{dataset_standardize, patchify, FeatureConfig, Spectrogram, Standardization};
use crate::metrics::{compute_metrics, confusion, Confusion, Metrics};
use crate::model::checkpoint::{Checkpoint, TrainingState};
use crate::model::{
    mixstyle_spectrograms, plan_mixing, ClassProbs, ForwardOptions, MixLevel, ModelConfig, Transformer,
};
use crate::par::{self, ExecMode};
use crate::signal::DeviceDomain;

/// One labeled clip, already converted to a log-mel spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spec: Spectrogram,
    pub label: BinaryLabel,
    pub domain: DeviceDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub mix_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub train_size: usize,
    pub validation_size: usize,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

impl FoldOutcome {
    /// Writes `<stem>.ckpt` and `<stem>.log.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join(format!("{stem}.ckpt"));
        let log = dir.join(format!("{stem}.log.json"));
        self.checkpoint.save(&ckpt)?;
        std::fs::write(&log, serde_json::to_string_pretty(&self.log)?)?;
        Ok((ckpt, log))
    }
}

fn standardized_patches(spec: &Spectrogram, st: &Standardization, features: &FeatureConfig) -> Result<Array2<f32>> {
    Ok(patchify(&st.apply_spectrogram(spec), features)?.patches)
}

fn check_grid(spec: &Spectrogram, features: &FeatureConfig, model: &ModelConfig) -> Result<()> {
    let grid = patchify(spec, features)?;
    if grid.grid_shape != model.grid || grid.patches.ncols() != model.patch_dim {
        return Err(Error::config(format!(
            "spectrogram yields grid {:?} of {}-value patches, model expects {:?} of {}",
            grid.grid_shape,
            grid.patches.ncols(),
            model.grid,
            model.patch_dim
        )));
    }
    Ok(())
}

/// Stratified hold-out: `fraction` of each class, rounded, goes to validation.
fn validation_split(labels: &[BinaryLabel], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4c49_4441_5445);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in BinaryLabel::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (batch as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7)
}

/// Class probabilities for `samples` under a checkpoint (weights untouched).
pub fn predict_samples(ck: &Checkpoint, samples: &[&Sample], exec: ExecMode) -> Result<Vec<ClassProbs>> {
    let model = Transformer::from_weights(ck.model.clone(), ck.weights.clone())?;
    let patches = par::try_map(exec, samples, |s| standardized_patches(&s.spec, &ck.standardization, &ck.features))?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in patches.chunks(64) {
        let views: Vec<ArrayView2<'_, f32>> = chunk.iter().map(|p| p.view()).collect();
        out.extend(model.predict(&views, exec)?);
    }
    Ok(out)
}

pub fn evaluate(ck: &Checkpoint, samples: &[&Sample], exec: ExecMode) -> Result<Confusion> {
    let preds: Vec<BinaryLabel> = predict_samples(ck, samples, exec)?
        .into_iter()
        .map(|p| p.prediction)
        .collect();
    let labels: Vec<BinaryLabel> = samples.iter().map(|s| s.label).collect();
    confusion(&labels, &preds)
}

/// Trains one model on `samples` and returns the checkpoint with the best
/// validation Score (the last epoch when there is no validation slice).
pub fn train_fold(
    samples: &[&Sample],
    features: &FeatureConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let mix = &model_cfg.mixstyle;
    cfg.validate(mix.is_enabled())?;
    model_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    check_grid(&samples[0].spec, features, model_cfg)?;
    let exec = cfg.exec;

    let labels: Vec<BinaryLabel> = samples.iter().map(|s| s.label).collect();
    let (train_idx, val_idx) = validation_split(&labels, cfg.validation_fraction, cfg.seed);
    let train: Vec<&Sample> = train_idx.iter().map(|&i| samples[i]).collect();
    let val: Vec<&Sample> = val_idx.iter().map(|&i| samples[i]).collect();

    let standardization = dataset_standardize(train.iter().map(|s| &s.spec))?;
    let spec_mixing = mix.is_enabled() && mix.level == MixLevel::Spectrogram;
    let std_specs: Vec<Spectrogram> = if spec_mixing {
        train.iter().map(|s| standardization.apply_spectrogram(&s.spec)).collect()
    } else {
        Vec::new()
    };
    let patches = par::try_map(exec, &train, |s| standardized_patches(&s.spec, &standardization, features))?;
    let train_labels: Vec<BinaryLabel> = train.iter().map(|s| s.label).collect();
    let train_domains: Vec<DeviceDomain> = train.iter().map(|s| s.domain).collect();
    let class_weights = cfg.class_weighting.then(|| {
        let n = train_labels.len() as f64;
        BinaryLabel::ALL.map(|c| {
            let nc = train_labels.iter().filter(|&&l| l == c).count().max(1) as f64;
            n / (2.0 * nc)
        })
    });

    let mut model = Transformer::<f32>::new(model_cfg.clone())?;
    let mut opt = AdamW::new(model_cfg);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, crate::model::Weights<f32>)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut mix_events, mut lr) = (0.0, 0usize, 0usize, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<BinaryLabel> = idx.iter().map(|&i| train_labels[i]).collect();
            let domains: Vec<DeviceDomain> = idx.iter().map(|&i| train_domains[i]).collect();
            let seed = batch_seed(cfg.seed, epoch, b);
            let mixed: Option<Vec<Array2<f32>>> = if spec_mixing && epoch_gate(mix, epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5350_4543);
                if rng.random::<f64>() < mix.p {
                    let plan = plan_mixing(&labels, &domains, mix.alpha, &mut rng);
                    mix_events += usize::from(plan.mixed_count() > 0);
                    let mut specs: Vec<Array2<f32>> = idx.iter().map(|&i| std_specs[i].values.clone()).collect();
                    mixstyle_spectrograms(&mut specs, &plan, mix.epsilon);
                    Some(
                        specs
                            .into_iter()
                            .zip(idx)
                            .map(|(values, &i)| {
                                let spec = Spectrogram {
                                    values,
                                    ..std_specs[i].clone()
                                };
                                patchify(&spec, features).map(|g| g.patches)
                            })
                            .collect::<Result<_>>()?,
                    )
                } else {
                    None
                }
            } else {
                None
            };
            let views: Vec<ArrayView2<'_, f32>> = match &mixed {
                Some(m) => m.iter().map(|p| p.view()).collect(),
                None => idx.iter().map(|&i| patches[i].view()).collect(),
            };
            let opts = ForwardOptions::train(epoch, seed).with_exec(exec);
            let (loss, mut grad, out) = model
                .loss_and_grad(&views, &labels, &domains, class_weights, &opts)
                .map_err(|e| numerical_context(e, epoch, b))?;
            if !grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}, batch {b}: non-finite gradient (loss {loss})"
                )));
            }
            if let Some(clip) = cfg.grad_clip_norm {
                let norm = grad.sq_norm().sqrt();
                if norm > clip {
                    grad.scale((clip / norm) as f32);
                }
            }
            lr = cfg.lr_at(step, steps_per_epoch);
            opt.update(&mut model.weights, &grad, lr, cfg);
            step += 1;
            mix_events += out.mix_events;
            loss_sum += loss * idx.len() as f64;
            correct += out
                .logits
                .iter()
                .zip(&labels)
                .filter(|(z, y)| crate::model::classify(z).prediction == **y)
                .count();
        }
        if !model.weights.all_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: weights became non-finite")));
        }

        let validation = if val.is_empty() {
            None
        } else {
            let probe = Checkpoint {
                model: model_cfg.clone(),
                features: features.clone(),
                standardization,
                weights: model.weights.clone(),
                state: TrainingState::default(),
                moments: None,
            };
            Some(compute_metrics(&evaluate(&probe, &val, exec)?)?)
        };
        let score = validation.map_or(epoch as f64, |m| m.score);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.weights.clone()));
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            mix_events,
            validation,
        };
        debug!(
            "epoch {epoch}: loss {:.4} acc {:.3} val score {}",
            entry.loss,
            entry.train_accuracy,
            validation.map_or("-".into(), |m| format!("{:.2}", m.score))
        );
        epochs.push(entry);
    }

    let (_, best_epoch, weights) = best.expect("at least one epoch");
    info!(
        "trained {} epochs on {} samples ({} held out), best epoch {best_epoch}",
        cfg.epochs,
        train.len(),
        val.len()
    );
    let mut state = TrainingState {
        epoch: best_epoch,
        step: opt.step,
        ..TrainingState::default()
    };
    state.notes.insert("seed".into(), cfg.seed.to_string());
    Ok(FoldOutcome {
        checkpoint: Checkpoint {
            model: model_cfg.clone(),
            features: features.clone(),
            standardization,
            weights,
            state,
            moments: Some(opt.moments),
        },
        log: TrainingLog {
            epochs,
            best_epoch,
            train_size: train.len(),
            validation_size: val.len(),
        },
    })
}

fn epoch_gate(mix: &crate::model::MixStyleConfig, epoch: usize) -> bool {
    match mix.epoch_windows.first().copied().flatten() {
        Some((start, end)) => (start..end).contains(&epoch),
        None => true,
    }
}

fn numerical_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}
