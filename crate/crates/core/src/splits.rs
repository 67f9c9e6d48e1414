//! Patient-level data partitioning: k-fold cross-validation on the source
//! set and the pseudo-pool/test split of the target set.
//!
//! All assignments happen at patient granularity so that no patient's
//! scans can appear on both sides of any split.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("{n_patients} patients cannot fill {k} folds")]
    InsufficientPatients { n_patients: usize, k: usize },
    #[error("fold count must be >= 2 (got {0})")]
    BadFoldCount(usize),
    #[error("fold index {index} out of range for {k} folds")]
    BadFoldIndex { index: usize, k: usize },
    #[error("fraction must lie strictly inside (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("split leaves one side without patients")]
    EmptySide,
}

/// k disjoint patient-id folds covering the source set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }
}

/// Pseudo-pool / test partition of the target patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSplit {
    pub pseudo_pool_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub seed: u64,
}

/// Shuffle patients with a seeded RNG and deal them round-robin into k folds.
pub fn make_cv_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<SplitPlan, SplitError> {
    if k < 2 {
        return Err(SplitError::BadFoldCount(k));
    }
    let mut patients = dataset.patient_ids();
    if patients.len() < k {
        return Err(SplitError::InsufficientPatients {
            n_patients: patients.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, p) in patients.into_iter().enumerate() {
        folds[i % k].push(p);
    }
    Ok(SplitPlan { folds, seed })
}

/// Seeded shuffle of target patients; the first `ceil(fraction * n)`
/// patients form the pseudo pool, the remainder the test set.
pub fn split_target(dataset: &Dataset, fraction: f64, seed: u64) -> Result<TargetSplit, SplitError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SplitError::InvalidFraction(fraction));
    }
    let mut patients = dataset.patient_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let n_pool = (fraction * patients.len() as f64).ceil() as usize;
    if n_pool == 0 || n_pool == patients.len() {
        return Err(SplitError::EmptySide);
    }
    let test_patients = patients.split_off(n_pool);
    Ok(TargetSplit {
        pseudo_pool_patients: patients,
        test_patients,
        seed,
    })
}

/// Split a dataset into (train, val) where val is exactly fold `val_fold`.
pub fn materialize(
    dataset: &Dataset,
    plan: &SplitPlan,
    val_fold: usize,
) -> Result<(Dataset, Dataset), SplitError> {
    if val_fold >= plan.k() {
        return Err(SplitError::BadFoldIndex {
            index: val_fold,
            k: plan.k(),
        });
    }
    let val_patients: HashSet<String> = plan.folds[val_fold].iter().cloned().collect();
    let train_patients: HashSet<String> = plan
        .folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != val_fold)
        .flat_map(|(_, f)| f.iter().cloned())
        .collect();
    Ok((
        dataset.subset_by_patients(&train_patients),
        dataset.subset_by_patients(&val_patients),
    ))
}
