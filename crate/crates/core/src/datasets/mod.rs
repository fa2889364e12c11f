//! Manifests, binary relabeling, stratified folds, experiment setups and the
//! synthetic two-device corpus.

mod manifest;
mod setup;
mod split;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::RawLabel;

pub use manifest::{Manifest, ManifestEntry};
pub use setup::{compose_setup, ExperimentSetup, FoldSets, SampleRef, SetupSplits};
pub use split::{stratified_group_kfold, stratified_kfold, FoldSplit, SplitStrategy};
pub use synth::{band_power, synth_generate, synth_generate_with, ClassCounts, SynthCorpus, SynthesisSpec};

/// Screening label; `Abnormal` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Normal,
    Abnormal,
}

impl BinaryLabel {
    pub const ALL: [BinaryLabel; 2] = [BinaryLabel::Normal, BinaryLabel::Abnormal];

    /// Class index used by the model head.
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Normal => 0,
            BinaryLabel::Abnormal => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            BinaryLabel::Normal => BinaryLabel::Abnormal,
            BinaryLabel::Abnormal => BinaryLabel::Normal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::Normal => "normal",
            BinaryLabel::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinaryLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(BinaryLabel::Normal),
            "abnormal" => Ok(BinaryLabel::Abnormal),
            other => Err(Error::Label(format!("unknown binary label `{other}`"))),
        }
    }
}

/// Collapses crackle, wheeze and both into a single abnormal class.
pub fn binarize(raw: RawLabel) -> Result<BinaryLabel> {
    match raw {
        RawLabel::Normal => Ok(BinaryLabel::Normal),
        RawLabel::Crackle | RawLabel::Wheeze | RawLabel::Both => Ok(BinaryLabel::Abnormal),
        RawLabel::Unlabeled => Err(Error::Label("unlabeled recording has no binary class".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_rule() {
        assert_eq!(binarize(RawLabel::Normal).unwrap(), BinaryLabel::Normal);
        assert_eq!(binarize(RawLabel::Crackle).unwrap(), BinaryLabel::Abnormal);
        assert_eq!(binarize(RawLabel::Wheeze).unwrap(), BinaryLabel::Abnormal);
        assert_eq!(binarize(RawLabel::Both).unwrap(), BinaryLabel::Abnormal);
        assert!(matches!(binarize(RawLabel::Unlabeled), Err(Error::Label(_))));
    }

    #[test]
    fn binarize_is_idempotent_on_its_output_domain() {
        // Mapping a binary label back to its canonical raw form and re-binarizing is stable.
        for b in BinaryLabel::ALL {
            let raw = match b {
                BinaryLabel::Normal => RawLabel::Normal,
                BinaryLabel::Abnormal => RawLabel::Both,
            };
            assert_eq!(binarize(raw).unwrap(), b);
            assert_eq!(b.as_str().parse::<BinaryLabel>().unwrap(), b);
        }
    }
}
