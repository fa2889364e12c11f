use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FoldSplit;
use crate::error::{Error, Result};
use crate::signal::DeviceDomain;

/// The five train/test domain compositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ExperimentSetup {
    /// Smartphone train, smartphone test.
    SmartphoneOnly = 1,
    /// Stethoscope + smartphone train, smartphone test, no mixing.
    Combined = 2,
    /// As [`Combined`](Self::Combined), with MixStyle during training.
    CombinedMixStyle = 3,
    /// Stethoscope train, stethoscope test.
    StethoscopeOnly = 4,
    /// Stethoscope train, smartphone test.
    CrossDevice = 5,
}

impl ExperimentSetup {
    pub const ALL: [ExperimentSetup; 5] = [
        ExperimentSetup::SmartphoneOnly,
        ExperimentSetup::Combined,
        ExperimentSetup::CombinedMixStyle,
        ExperimentSetup::StethoscopeOnly,
        ExperimentSetup::CrossDevice,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    /// Row label used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            ExperimentSetup::SmartphoneOnly => "AST (Smartphone Only)",
            ExperimentSetup::Combined => "AST (Combined w/o MixStyle)",
            ExperimentSetup::CombinedMixStyle => "AST (Combined w MixStyle)",
            ExperimentSetup::StethoscopeOnly => "AST (Stethoscope Only)",
            ExperimentSetup::CrossDevice => "AST (Tested on Smartphone)",
        }
    }

    pub fn uses_mixstyle(self) -> bool {
        self == ExperimentSetup::CombinedMixStyle
    }

    pub fn train_domains(self) -> &'static [DeviceDomain] {
        use DeviceDomain::*;
        match self {
            ExperimentSetup::SmartphoneOnly => &[Smartphone],
            ExperimentSetup::Combined | ExperimentSetup::CombinedMixStyle => &[Stethoscope, Smartphone],
            ExperimentSetup::StethoscopeOnly | ExperimentSetup::CrossDevice => &[Stethoscope],
        }
    }

    pub fn test_domain(self) -> DeviceDomain {
        match self {
            ExperimentSetup::StethoscopeOnly => DeviceDomain::Stethoscope,
            _ => DeviceDomain::Smartphone,
        }
    }

    /// Setups whose training data is identical (so checkpoints can be shared).
    pub fn train_key(self) -> &'static str {
        match self {
            ExperimentSetup::SmartphoneOnly => "phone",
            ExperimentSetup::Combined => "combined",
            ExperimentSetup::CombinedMixStyle => "combined-mixstyle",
            ExperimentSetup::StethoscopeOnly | ExperimentSetup::CrossDevice => "steth",
        }
    }
}

impl TryFrom<u8> for ExperimentSetup {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        ExperimentSetup::ALL
            .into_iter()
            .find(|s| s.number() == n)
            .ok_or_else(|| Error::config(format!("setup must be 1..=5, got {n}")))
    }
}

impl From<ExperimentSetup> for u8 {
    fn from(s: ExperimentSetup) -> u8 {
        s.number()
    }
}

impl FromStr for ExperimentSetup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("setup must be 1..=5, got `{s}`")))?;
        n.try_into()
    }
}

impl fmt::Display for ExperimentSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Setup {}", self.number())
    }
}

/// A sample in one of the two domain manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub domain: DeviceDomain,
    pub index: usize,
}

/// Per-domain fold splits; a setup needs the splits of every domain it touches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetupSplits {
    pub stethoscope: Option<FoldSplit>,
    pub smartphone: Option<FoldSplit>,
}

impl SetupSplits {
    fn get(&self, d: DeviceDomain) -> Option<&FoldSplit> {
        match d {
            DeviceDomain::Stethoscope => self.stethoscope.as_ref(),
            DeviceDomain::Smartphone => self.smartphone.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSets {
    pub train: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

/// Train/test composition per fold.
///
/// Fold `f` of every domain contributes its train part to the training set of
/// setups that train on that domain; the test set is fold `f`'s test part of
/// the setup's test domain. A smartphone test index is therefore never in the
/// same fold's training set.
pub fn compose_setup(setup: ExperimentSetup, splits: &SetupSplits) -> Result<Vec<FoldSets>> {
    let needed: Vec<DeviceDomain> = {
        let mut v = setup.train_domains().to_vec();
        if !v.contains(&setup.test_domain()) {
            v.push(setup.test_domain());
        }
        v
    };
    let mut k = None;
    for &d in &needed {
        let split = splits
            .get(d)
            .ok_or_else(|| Error::config(format!("{setup} needs a {d} split")))?;
        match k {
            None => k = Some(split.k),
            Some(k0) if k0 != split.k => {
                return Err(Error::config(format!("fold counts differ: {k0} vs {}", split.k)))
            }
            _ => {}
        }
    }
    let k = k.expect("at least one domain");
    let refs = |d: DeviceDomain, idx: &[usize]| -> Vec<SampleRef> {
        idx.iter().map(|&index| SampleRef { domain: d, index }).collect()
    };
    Ok((0..k)
        .map(|f| {
            let train = setup
                .train_domains()
                .iter()
                .flat_map(|&d| refs(d, &splits.get(d).expect("checked").folds[f].0))
                .collect();
            let td = setup.test_domain();
            let test = refs(td, &splits.get(td).expect("checked").folds[f].1);
            FoldSets { train, test }
        })
        .collect())
}
