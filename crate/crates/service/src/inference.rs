use std::path::Path;

use auscult::datasets::BinaryLabel;
use auscult::features::MelExtractor;
use auscult::model::checkpoint::Checkpoint;
use auscult::par::ExecMode;
use auscult::signal::{preprocess, segment, AudioRecording, DeviceDomain, PreprocessConfig};
use auscult::training::{predict_samples, Sample};

use crate::error::{Result, ServiceError};
use crate::store::content_hash;

/// A loaded checkpoint plus the waveform chain that feeds it. Read-only after construction.
pub struct Classifier {
    checkpoint: Checkpoint,
    extractor: MelExtractor,
    preprocess: PreprocessConfig,
    clip_s: f64,
    hop_s: f64,
    version: String,
    exec: ExecMode,
}

impl Classifier {
    pub fn new(checkpoint: Checkpoint, preprocess: PreprocessConfig, clip_s: f64, hop_s: f64) -> Result<Self> {
        if checkpoint.features.sample_rate_hz != preprocess.target_rate_hz {
            return Err(ServiceError::Config(format!(
                "checkpoint expects {} Hz input, preprocessing produces {} Hz",
                checkpoint.features.sample_rate_hz, preprocess.target_rate_hz
            )));
        }
        let extractor = MelExtractor::new(&checkpoint.features).map_err(|e| ServiceError::Config(e.to_string()))?;
        let bytes = checkpoint.to_bytes().map_err(|e| ServiceError::Config(e.to_string()))?;
        let version = format!("ast-{}", &content_hash(&bytes)[..12]);
        Ok(Self {
            checkpoint,
            extractor,
            preprocess,
            clip_s,
            hop_s,
            version,
            exec: ExecMode::default(),
        })
    }

    pub fn load(path: &Path, preprocess: PreprocessConfig, clip_s: f64, hop_s: f64) -> Result<Self> {
        let ck = Checkpoint::load(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::new(ck, preprocess, clip_s, hop_s)
    }

    /// Short hash of the serialized checkpoint.
    pub fn version(&self) -> &str {
        &self.version
    }

    /// Abnormal-class probability for every `clip_s` clip of the recording.
    pub fn clip_probabilities(&self, samples: Vec<f64>, sample_rate_hz: u32) -> Result<Vec<f64>> {
        let rec = AudioRecording::new(samples, sample_rate_hz, DeviceDomain::Smartphone);
        let clean = preprocess(&rec, &self.preprocess).map_err(|e| ServiceError::BadAudio(e.to_string()))?;
        let clips = segment(&clean, self.clip_s, self.hop_s).map_err(|e| ServiceError::BadAudio(e.to_string()))?;
        if clips.is_empty() {
            return Err(ServiceError::TooShort {
                duration_s: clean.duration_s(),
                min_s: self.clip_s,
            });
        }
        let specs = clips
            .iter()
            .map(|c| {
                Ok(Sample {
                    spec: self.extractor.extract(c)?,
                    // Placeholder; prediction ignores labels.
                    label: BinaryLabel::Normal,
                    domain: DeviceDomain::Smartphone,
                })
            })
            .collect::<auscult::Result<Vec<_>>>()
            .map_err(|e| ServiceError::BadAudio(e.to_string()))?;
        let refs: Vec<&Sample> = specs.iter().collect();
        let probs = predict_samples(&self.checkpoint, &refs, self.exec)
            .map_err(|e| ServiceError::ServiceUnavailable(format!("inference failed: {e}")))?;
        Ok(probs.iter().map(|p| p.p_abnormal()).collect())
    }
}
