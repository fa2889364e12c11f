//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte tag `ASTCKPT1`, a little-endian `u32` header length, a
//! JSON header, then every tensor as little-endian `f32` in directory order.
//! The header echoes the model and feature configs, the frozen
//! standardization, the training state and a directory of named shapes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Standardization};

const MAGIC: &[u8; 8] = b"ASTCKPT1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Epoch the weights were taken from (zero-based).
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Free-form annotations such as setup, fold and validation score.
    pub notes: BTreeMap<String, String>,
}

/// Adaptive-moment optimizer state, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Weights<f32>,
    pub second: Weights<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub standardization: Standardization,
    pub weights: Weights<f32>,
    pub state: TrainingState,
    pub moments: Option<Moments>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    features: FeatureConfig,
    standardization: Standardization,
    state: TrainingState,
    tensors: Vec<TensorEntry>,
}

fn directory(prefix: &str, w: &Weights<f32>) -> Vec<TensorEntry> {
    w.tensors()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut groups = vec![("", &self.weights)];
        if let Some(m) = &self.moments {
            groups.push(("adam.m.", &m.first));
            groups.push(("adam.v.", &m.second));
        }
        let header = Header {
            model: self.model.clone(),
            features: self.features.clone(),
            standardization: self.standardization,
            state: self.state.clone(),
            tensors: groups.iter().flat_map(|(p, w)| directory(p, w)).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.weights.num_params() * groups.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, w) in groups {
            for (_, t) in w.tensors() {
                for v in t.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing ASTCKPT1 tag"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        header.model.validate()?;
        let mut data = &bytes[12 + hlen..];

        let mut read_group = |prefix: &str, entries: &[TensorEntry]| -> Result<Weights<f32>> {
            let mut w = Weights::<f32>::zeros(&header.model);
            let expected = directory(prefix, &w);
            if entries.len() != expected.len() {
                return Err(bad("tensor directory does not match the model config"));
            }
            for ((mut dst, want), got) in w.tensors_mut().into_iter().zip(&expected).zip(entries) {
                if want.name != got.name || want.shape != got.shape {
                    return Err(bad(&format!("expected {} {:?}, found {} {:?}", want.name, want.shape, got.name, got.shape)));
                }
                let n = dst.len() * 4;
                if data.len() < n {
                    return Err(bad("truncated tensor data"));
                }
                for (d, c) in dst.iter_mut().zip(data[..n].chunks_exact(4)) {
                    *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                }
                data = &data[n..];
            }
            Ok(w)
        };

        let per = header.tensors.len();
        let n_weights = Weights::<f32>::zeros(&header.model).tensors().len();
        let weights = read_group("", &header.tensors[..n_weights.min(per)])?;
        let moments = match per / n_weights.max(1) {
            1 => None,
            3 => Some(Moments {
                first: read_group("adam.m.", &header.tensors[n_weights..2 * n_weights])?,
                second: read_group("adam.v.", &header.tensors[2 * n_weights..])?,
            }),
            _ => return Err(bad("unexpected tensor count")),
        };
        if per % n_weights != 0 {
            return Err(bad("unexpected tensor count"));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            model: header.model,
            features: header.features,
            standardization: header.standardization,
            weights,
            state: header.state,
            moments,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| match e {
            Error::Io(e) => Error::Io(e),
            other => Error::format(path, other.to_string()),
        })
    }
}
