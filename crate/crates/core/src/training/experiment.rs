use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::fold::{evaluate, train_fold, Sample};
use super::TrainConfig;
use crate::datasets::{
    compose_setup, stratified_group_kfold, stratified_kfold, ExperimentSetup, FoldSplit, Manifest,
    SampleRef, SetupSplits, SplitStrategy,
};
use crate::error::{Error, Result};
use crate::features::{read_spectrogram, write_spectrogram, FeatureConfig, MelExtractor};
use crate::metrics::{FoldResult, MetricsReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::{MixStyleConfig, ModelConfig};
use crate::par;
use crate::signal::wav::read_wav;
use crate::signal::{preprocess, AudioRecording, DeviceDomain, PreprocessConfig, DEFAULT_CLIP_S};

/// Everything a five-fold run depends on; readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub features: FeatureConfig,
    pub preprocess: PreprocessConfig,
    /// Clips are cropped or loop-padded to this length after preprocessing.
    pub clip_s: f64,
    /// Architecture; `mixstyle` applies to the MixStyle setup only.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub split_seed: u64,
    pub split_strategy: SplitStrategy,
    /// Also report macro-averaged F1.
    pub macro_f1: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            preprocess: PreprocessConfig::default(),
            clip_s: DEFAULT_CLIP_S,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            split_seed: 0,
            split_strategy: SplitStrategy::Sample,
            macro_f1: false,
        }
    }
}

impl ExperimentConfig {
    /// Small-footprint preset: coarse spectrogram patches, short schedule.
    /// A five-fold run over a few thousand clips fits a single CPU core.
    pub fn compact() -> Self {
        let features = FeatureConfig::compact();
        let clip_samples = (DEFAULT_CLIP_S * features.sample_rate_hz as f64).round() as usize;
        Self {
            model: ModelConfig {
                embed_dim: 64,
                num_layers: 6,
                num_heads: 4,
                ..ModelConfig::for_features(&features, clip_samples).expect("compact grid")
            },
            features,
            train: TrainConfig {
                epochs: 12,
                batch_size: 32,
                learning_rate: 5e-4,
                warmup_epochs: 2,
                grad_clip_norm: Some(1.0),
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_s * self.preprocess.target_rate_hz as f64).round() as usize
    }

    /// Model config for `setup`: grid sized to the clip, mixing only where the setup uses it.
    pub fn model_for(&self, setup: ExperimentSetup) -> Result<ModelConfig> {
        let grid = self
            .features
            .grid_for(self.clip_samples())
            .ok_or_else(|| Error::config("clip too short for one patch"))?;
        Ok(ModelConfig {
            patch_dim: self.features.patch_dim(),
            grid,
            mixstyle: if setup.uses_mixstyle() {
                self.model.mixstyle.clone()
            } else {
                MixStyleConfig::disabled()
            },
            ..self.model.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.features.sample_rate_hz != self.preprocess.target_rate_hz {
            return Err(Error::config("features.sample_rate_hz must equal preprocess.target_rate_hz"));
        }
        if !(self.clip_s > 0.0) {
            return Err(Error::config("clip_s must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        for setup in ExperimentSetup::ALL {
            let m = self.model_for(setup)?;
            m.validate()?;
            self.train.validate(m.mixstyle.is_enabled())?;
        }
        Ok(())
    }

    /// Identity of a trained model: configs, split, and corpus sizes.
    fn fingerprint(&self, setup: ExperimentSetup, corpus: &Corpus) -> Result<String> {
        let sizes = [DeviceDomain::Stethoscope, DeviceDomain::Smartphone]
            .map(|d| corpus.domain(d).map_or(0, |x| x.samples.len()));
        Ok(serde_json::to_string(&serde_json::json!({
            "train_key": setup.train_key(),
            "features": self.features,
            "preprocess": self.preprocess,
            "clip_s": self.clip_s,
            "model": self.model_for(setup)?,
            "train": self.train,
            "folds": self.folds,
            "split_seed": self.split_seed,
            "split_strategy": self.split_strategy,
            "sizes": sizes,
        }))?)
    }
}

/// A loaded manifest and its spectrograms, index-aligned.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub stethoscope: Option<DomainData>,
    pub smartphone: Option<DomainData>,
}

impl Corpus {
    pub fn domain(&self, d: DeviceDomain) -> Option<&DomainData> {
        match d {
            DeviceDomain::Stethoscope => self.stethoscope.as_ref(),
            DeviceDomain::Smartphone => self.smartphone.as_ref(),
        }
    }

    fn sample(&self, r: &SampleRef) -> Result<&Sample> {
        self.domain(r.domain)
            .and_then(|d| d.samples.get(r.index))
            .ok_or_else(|| Error::config(format!("no {} sample {}", r.domain, r.index)))
    }
}

/// Loop-pads or crops to exactly `n` samples.
fn fix_length(samples: &[f64], n: usize) -> Vec<f64> {
    samples.iter().copied().cycle().take(n).collect()
}

#[derive(Serialize, Deserialize, PartialEq)]
struct CacheKey {
    features: FeatureConfig,
    preprocess: PreprocessConfig,
    clip_s: f64,
    paths: Vec<String>,
}

/// Reads, preprocesses and featurizes every entry of `manifest`.
///
/// With `cache_dir`, spectrograms are stored there and reused while the
/// configs and the manifest's path list are unchanged.
pub fn load_domain(manifest: &Manifest, cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<DomainData> {
    let domain = match manifest.entries.first() {
        Some(e) => e.device_domain,
        None => {
            return Ok(DomainData {
                manifest: manifest.clone(),
                samples: Vec::new(),
            })
        }
    };
    if manifest.entries.iter().any(|e| e.device_domain != domain) {
        return Err(Error::invalid("a domain manifest must hold a single device domain"));
    }
    let labels = manifest.labels()?;
    let key = CacheKey {
        features: cfg.features.clone(),
        preprocess: cfg.preprocess,
        clip_s: cfg.clip_s,
        paths: manifest.entries.iter().map(|e| e.audio_path.clone()).collect(),
    };
    let cache = cache_dir.map(|d| d.join(domain.as_str()));
    let cached = cache.as_ref().is_some_and(|dir| {
        std::fs::read_to_string(dir.join("key.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<CacheKey>(&s).ok())
            .is_some_and(|k| k == key)
    });

    let extractor = MelExtractor::new(&cfg.features)?;
    let n = cfg.clip_samples();
    let exec = cfg.train.exec;
    let idx: Vec<usize> = (0..manifest.len()).collect();
    let specs = par::try_map(exec, &idx, |&i| {
        if cached {
            let path = cache.as_ref().expect("cached").join(format!("{i:06}.lmspec"));
            return read_spectrogram(path);
        }
        let e = &manifest.entries[i];
        let path = manifest.resolve(e);
        let pcm = read_wav(&path)?;
        let mut rec = AudioRecording::new(pcm.samples, pcm.sample_rate_hz, domain);
        rec.site = e.site;
        rec.raw_label = e.raw_label;
        rec.patient_id = e.patient_id.clone();
        let clean = preprocess(&rec, &cfg.preprocess).map_err(|err| Error::format(&path, err.to_string()))?;
        extractor.extract_samples(&fix_length(&clean.samples, n))
    })?;

    if let (Some(dir), false) = (&cache, cached) {
        std::fs::create_dir_all(dir)?;
        for (i, s) in specs.iter().enumerate() {
            write_spectrogram(dir.join(format!("{i:06}.lmspec")), s)?;
        }
        std::fs::write(dir.join("key.json"), serde_json::to_string(&key)?)?;
    }
    info!("{domain}: {} clips featurized{}", specs.len(), if cached { " (cached)" } else { "" });
    Ok(DomainData {
        manifest: manifest.clone(),
        samples: specs
            .into_iter()
            .zip(labels)
            .map(|(spec, label)| Sample { spec, label, domain })
            .collect(),
    })
}

/// Fold splits for every domain present in `corpus`.
pub fn make_splits(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<SetupSplits> {
    let split = |d: &DomainData| -> Result<FoldSplit> {
        let labels: Vec<_> = d.samples.iter().map(|s| s.label).collect();
        match cfg.split_strategy {
            SplitStrategy::Sample => stratified_kfold(&labels, cfg.folds, cfg.split_seed),
            SplitStrategy::Patient => {
                let patients: Vec<String> = d.manifest.entries.iter().map(|e| e.patient_id.clone()).collect();
                stratified_group_kfold(&labels, &patients, cfg.folds, cfg.split_seed)
            }
        }
    };
    Ok(SetupSplits {
        stethoscope: corpus.stethoscope.as_ref().map(split).transpose()?,
        smartphone: corpus.smartphone.as_ref().map(split).transpose()?,
    })
}

fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains (or reuses) the fold-`fold` model for `setup` and scores its test set.
///
/// With `out_dir`, checkpoints live at `checkpoints/<train key>/fold<k>.ckpt`;
/// a checkpoint whose recorded fingerprint matches is reused instead of retrained,
/// which is how Setup 5 picks up Setup 4's models.
pub fn run_fold(
    setup: ExperimentSetup,
    fold: usize,
    corpus: &Corpus,
    splits: &SetupSplits,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<FoldResult> {
    let sets = compose_setup(setup, splits)?;
    let set = sets
        .get(fold)
        .ok_or_else(|| Error::config(format!("fold {fold} out of range")))?;
    let fingerprint = cfg.fingerprint(setup, corpus)?;
    let ckpt_dir: Option<PathBuf> = out_dir.map(|d| d.join("checkpoints").join(setup.train_key()));
    let ckpt_path = ckpt_dir.as_ref().map(|d| d.join(format!("fold{fold}.ckpt")));

    let reusable = ckpt_path
        .as_ref()
        .filter(|p| p.exists())
        .and_then(|p| Checkpoint::load(p).ok())
        .filter(|ck| ck.state.notes.get("fingerprint") == Some(&fingerprint));
    let ck = match reusable {
        Some(ck) => {
            info!("{setup} fold {fold}: reusing {}", ckpt_path.as_ref().expect("exists").display());
            ck
        }
        None => {
            let train: Vec<&Sample> = set.train.iter().map(|r| corpus.sample(r)).collect::<Result<_>>()?;
            let model = ModelConfig {
                seed: fold_seed(cfg.model.seed, fold),
                ..cfg.model_for(setup)?
            };
            let train_cfg = TrainConfig {
                seed: fold_seed(cfg.train.seed, fold),
                ..cfg.train.clone()
            };
            info!("{setup} fold {fold}: training on {} clips", train.len());
            let mut outcome = train_fold(&train, &cfg.features, &model, &train_cfg)?;
            let notes = &mut outcome.checkpoint.state.notes;
            notes.insert("fingerprint".into(), fingerprint);
            notes.insert("train_key".into(), setup.train_key().into());
            notes.insert("fold".into(), fold.to_string());
            if let Some(dir) = &ckpt_dir {
                outcome.save(dir, &format!("fold{fold}"))?;
            }
            outcome.checkpoint
        }
    };
    let test: Vec<&Sample> = set.test.iter().map(|r| corpus.sample(r)).collect::<Result<_>>()?;
    let c = evaluate(&ck, &test, cfg.train.exec)?;
    FoldResult::new(fold, c, cfg.macro_f1)
}

/// All folds of one setup, aggregated into a report.
pub fn run_experiment(
    setup: ExperimentSetup,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let splits = make_splits(corpus, cfg)?;
    let folds = (0..cfg.folds)
        .map(|f| run_fold(setup, f, corpus, &splits, cfg, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let echo = serde_json::json!({
        "setup": setup.number(),
        "train_domains": setup.train_domains(),
        "test_domain": setup.test_domain(),
        "experiment": cfg,
        "model": cfg.model_for(setup)?,
    });
    MetricsReport::from_folds(setup.number(), setup.title(), folds, echo)
}
