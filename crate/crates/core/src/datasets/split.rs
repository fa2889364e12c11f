use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BinaryLabel;
use crate::error::{Error, Result};

/// How samples are grouped before fold assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Each recording is assigned independently. Recordings of one patient can
    /// land on both sides of a fold.
    #[default]
    Sample,
    /// Every recording of a patient goes to the same fold; class balance is
    /// then only approximate.
    Patient,
}

/// K-fold partition of sample indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    /// `(train, test)` index lists per fold, each sorted ascending.
    pub folds: Vec<(Vec<usize>, Vec<usize>)>,
}

impl FoldSplit {
    /// Builds a split from explicit test folds; train sets are the complements.
    pub fn from_test_folds(n: usize, test_folds: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let mut owner = vec![None; n];
        for (f, test) in test_folds.iter().enumerate() {
            for &i in test {
                match owner.get_mut(i) {
                    None => return Err(Error::invalid(format!("index {i} out of range {n}"))),
                    Some(Some(_)) => return Err(Error::invalid(format!("index {i} in two test folds"))),
                    Some(slot) => *slot = Some(f),
                }
            }
        }
        if let Some(i) = owner.iter().position(Option::is_none) {
            return Err(Error::invalid(format!("index {i} is in no test fold")));
        }
        let folds = test_folds
            .into_iter()
            .enumerate()
            .map(|(f, mut test)| {
                test.sort_unstable();
                let train = (0..n).filter(|&i| owner[i] != Some(f)).collect();
                (train, test)
            })
            .collect::<Vec<_>>();
        Ok(Self {
            k: folds.len(),
            seed,
            folds,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.folds.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn test_fold_of(&self) -> Vec<usize> {
        let mut owner = vec![0; self.n_samples()];
        for (f, (_, test)) in self.folds.iter().enumerate() {
            for &i in test {
                owner[i] = f;
            }
        }
        owner
    }
}

fn check_classes(labels: &[BinaryLabel], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be at least 2, got {k}")));
    }
    // A class smaller than k is allowed (some test folds then lack it, within
    // the one-sample tolerance); an absent class or fewer samples than folds is not.
    for class in BinaryLabel::ALL {
        if !labels.contains(&class) {
            return Err(Error::Stratification(format!("no {class} samples to stratify")));
        }
    }
    if labels.len() < k {
        return Err(Error::Stratification(format!(
            "{} samples cannot populate {k} folds",
            labels.len()
        )));
    }
    Ok(())
}

/// Sample-level stratified k-fold.
///
/// Indices of each class are shuffled, the class lists are concatenated, and
/// the result is dealt round-robin. Each class is therefore spread over folds
/// within one of its proportional share, and fold sizes differ by at most one.
pub fn stratified_kfold(labels: &[BinaryLabel], k: usize, seed: u64) -> Result<FoldSplit> {
    check_classes(labels, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for class in BinaryLabel::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut tests = vec![Vec::new(); k];
    for (pos, i) in order.into_iter().enumerate() {
        tests[pos % k].push(i);
    }
    FoldSplit::from_test_folds(labels.len(), tests, seed)
}

/// Patient-grouped stratified k-fold (greedy).
///
/// Patients are shuffled, then placed largest-first into the fold whose
/// class counts are furthest below their proportional target.
pub fn stratified_group_kfold(
    labels: &[BinaryLabel],
    patients: &[String],
    k: usize,
    seed: u64,
) -> Result<FoldSplit> {
    check_classes(labels, k)?;
    if labels.len() != patients.len() {
        return Err(Error::invalid("labels and patients differ in length"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        groups.entry(p.as_str()).or_default().push(i);
    }
    if groups.len() < k {
        return Err(Error::Stratification(format!(
            "{} patients cannot populate {k} folds",
            groups.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let totals = BinaryLabel::ALL.map(|c| labels.iter().filter(|&&l| l == c).count() as f64);
    let mut counts = vec![[0usize; 2]; k];
    let mut tests = vec![Vec::new(); k];
    for g in groups {
        let mut gc = [0usize; 2];
        for &i in &g {
            gc[labels[i].index()] += 1;
        }
        // Deficit after adding the group, summed relative to per-fold targets.
        let best = (0..k)
            .min_by(|&a, &b| {
                let cost = |f: usize| -> f64 {
                    (0..2)
                        .map(|c| (counts[f][c] + gc[c]) as f64 / (totals[c] / k as f64))
                        .sum()
                };
                cost(a).total_cmp(&cost(b))
            })
            .expect("k >= 2");
        counts[best][0] += gc[0];
        counts[best][1] += gc[1];
        tests[best].extend(g);
    }
    if tests.iter().any(Vec::is_empty) {
        return Err(Error::Stratification("a patient-grouped fold came out empty".into()));
    }
    FoldSplit::from_test_folds(labels.len(), tests, seed)
}
