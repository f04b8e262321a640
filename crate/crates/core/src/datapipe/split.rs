//! Hold-out and k-fold partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::WindowedDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    FixedHoldout,
    KFold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    BySubject,
    ByWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    pub grouping: Grouping,
    /// Test share for hold-out mode.
    #[serde(default = "default_fraction")]
    pub holdout_fraction: f64,
}

fn default_k() -> usize {
    10
}

fn default_fraction() -> f64 {
    0.3
}

impl SplitSpec {
    pub fn k_fold(k: usize, grouping: Grouping, seed: u64) -> Self {
        Self {
            mode: SplitMode::KFold,
            k,
            seed,
            grouping,
            holdout_fraction: default_fraction(),
        }
    }

    pub fn holdout(fraction: f64, grouping: Grouping, seed: u64) -> Self {
        Self {
            mode: SplitMode::FixedHoldout,
            k: 2,
            seed,
            grouping,
            holdout_fraction: fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SplitMode::KFold if self.k < 2 => Err(Error::Config(vec![format!("k-fold needs k >= 2, got {}", self.k)])),
            SplitMode::FixedHoldout if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) => Err(Error::Config(vec![
                format!("holdout_fraction must lie in (0, 1), got {}", self.holdout_fraction),
            ])),
            _ => Ok(()),
        }
    }
}

/// `(train, test)` index lists, each sorted ascending.
pub fn split_indices(subjects: &[u32], spec: &SplitSpec) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    spec.validate()?;
    let n = subjects.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // test-side membership: fold id per sample
    let (folds, fold_of): (usize, Vec<usize>) = match (spec.mode, spec.grouping) {
        (SplitMode::KFold, Grouping::ByWindow) => {
            if spec.k > n {
                return Err(Error::InvalidArgument(format!("k = {} exceeds the {n} samples", spec.k)));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut fold_of = vec![0; n];
            for f in 0..spec.k {
                for &i in &order[f * n / spec.k..(f + 1) * n / spec.k] {
                    fold_of[i] = f;
                }
            }
            (spec.k, fold_of)
        }
        (SplitMode::KFold, Grouping::BySubject) => {
            let groups = subject_groups(subjects, &mut rng);
            if spec.k > groups.len() {
                return Err(Error::InvalidArgument(format!(
                    "k = {} exceeds the {} distinct subjects",
                    spec.k,
                    groups.len()
                )));
            }
            // largest subjects first, each to the currently smallest fold
            let mut by_size = groups;
            by_size.sort_by_key(|g| std::cmp::Reverse(g.len()));
            let mut sizes = vec![0usize; spec.k];
            let mut fold_of = vec![0; n];
            for g in by_size {
                let f = (0..spec.k).min_by_key(|&f| sizes[f]).unwrap();
                sizes[f] += g.len();
                for i in g {
                    fold_of[i] = f;
                }
            }
            (spec.k, fold_of)
        }
        (SplitMode::FixedHoldout, Grouping::ByWindow) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let test = ((n as f64 * spec.holdout_fraction).round() as usize).clamp(1, n.saturating_sub(1));
            if n < 2 {
                return Err(Error::InvalidArgument("hold-out needs at least 2 samples".into()));
            }
            let mut fold_of = vec![1; n];
            for &i in &order[..test] {
                fold_of[i] = 0;
            }
            (1, fold_of)
        }
        (SplitMode::FixedHoldout, Grouping::BySubject) => {
            let groups = subject_groups(subjects, &mut rng);
            if groups.len() < 2 {
                return Err(Error::InvalidArgument("subject hold-out needs at least 2 subjects".into()));
            }
            let target = (n as f64 * spec.holdout_fraction).round() as usize;
            let mut fold_of = vec![1; n];
            let mut taken = 0;
            for g in groups.iter().take(groups.len() - 1) {
                if taken >= target.max(1) {
                    break;
                }
                taken += g.len();
                for &i in g {
                    fold_of[i] = 0;
                }
            }
            (1, fold_of)
        }
    };
    Ok((0..folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == f);
            (train, test)
        })
        .collect())
}

/// Sample indices per distinct subject, in a seeded random subject order.
fn subject_groups(subjects: &[u32], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut ids: Vec<u32> = subjects.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(rng);
    ids.iter()
        .map(|&s| (0..subjects.len()).filter(|&i| subjects[i] == s).collect())
        .collect()
}

pub fn split(dataset: &WindowedDataset, spec: &SplitSpec) -> Result<Vec<(WindowedDataset, WindowedDataset)>> {
    split_indices(dataset.subjects(), spec)?
        .into_iter()
        .map(|(train, test)| Ok((dataset.subset(&train)?, dataset.subset(&test)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ten_folds_of_ten() {
        let subjects = vec![0; 100];
        let folds = split_indices(&subjects, &SplitSpec::k_fold(10, Grouping::ByWindow, 4)).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen = BTreeSet::new();
        for (train, test) in &folds {
            assert_eq!(test.len(), 10);
            assert_eq!(train.len(), 90);
            for &i in test {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn subjects_never_straddle() {
        let subjects: Vec<u32> = (0..90).map(|i| (i * 7 % 13) as u32).collect();
        for (train, test) in split_indices(&subjects, &SplitSpec::k_fold(5, Grouping::BySubject, 1)).unwrap() {
            let a: BTreeSet<_> = train.iter().map(|&i| subjects[i]).collect();
            let b: BTreeSet<_> = test.iter().map(|&i| subjects[i]).collect();
            assert!(a.is_disjoint(&b));
            assert_eq!(train.len() + test.len(), 90);
        }
        let (train, test) = &split_indices(&subjects, &SplitSpec::holdout(0.3, Grouping::BySubject, 1)).unwrap()[0];
        let a: BTreeSet<_> = train.iter().map(|&i| subjects[i]).collect();
        let b: BTreeSet<_> = test.iter().map(|&i| subjects[i]).collect();
        assert!(a.is_disjoint(&b) && !a.is_empty() && !b.is_empty());
    }

    #[test]
    fn invalid_specs() {
        assert!(split_indices(&[0; 5], &SplitSpec::k_fold(6, Grouping::ByWindow, 0)).is_err());
        assert!(split_indices(&[0; 5], &SplitSpec::k_fold(1, Grouping::ByWindow, 0)).is_err());
        assert!(split_indices(&[0, 0, 1], &SplitSpec::k_fold(3, Grouping::BySubject, 0)).is_err());
        assert!(split_indices(&[0; 5], &SplitSpec::holdout(1.0, Grouping::ByWindow, 0)).is_err());
    }

    #[test]
    fn seeded_and_deterministic() {
        let s: Vec<u32> = (0..40).map(|i| i % 8).collect();
        let spec = SplitSpec::k_fold(4, Grouping::BySubject, 9);
        assert_eq!(split_indices(&s, &spec).unwrap(), split_indices(&s, &spec).unwrap());
    }
}
