use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::seed;

/// Patient-disjoint k-fold assignment. Fold `k` is the test partition of
/// split `k`; its complement is the training partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignments: BTreeMap<String, usize>,
    /// `(numerator, denominator)` share of patients used for training.
    pub train_fraction: (usize, usize),
    pub seed: u64,
}

/// Assigns patients to folds.
///
/// Patients are shuffled, stably ordered by their positive-label count
/// (descending), then dealt round-robin. Fold sizes therefore differ by at
/// most one patient and positives spread evenly across folds.
pub fn make_folds(manifest: &DatasetManifest, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let active = manifest.active_joints();
    let mut positives: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &manifest.records {
        *positives.entry(r.patient_id.as_str()).or_default() += r.labels.positives(&active);
    }
    if positives.len() < n_folds {
        return Err(Error::Config(format!(
            "{} patients cannot fill {n_folds} folds",
            positives.len()
        )));
    }
    let mut patients: Vec<(&str, usize)> = positives.into_iter().collect();
    patients.shuffle(&mut seed::rng(seed));
    patients.sort_by_key(|p| std::cmp::Reverse(p.1));
    let assignments = patients
        .iter()
        .enumerate()
        .map(|(i, (p, _))| (p.to_string(), i % n_folds))
        .collect();
    Ok(FoldPlan {
        n_folds,
        assignments,
        train_fraction: (n_folds - 1, n_folds),
        seed,
    })
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignments.get(patient).copied()
    }

    pub fn test_patients(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn train_patients(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Record indices `(train, test)` of split `fold`.
    pub fn split(&self, manifest: &DatasetManifest, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            match self.fold_of(&r.patient_id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::Config(format!(
                        "patient `{}` missing from fold plan",
                        r.patient_id
                    )))
                }
            }
        }
        Ok((train, test))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: FoldPlan = serde_json::from_str(&text)?;
        if plan.assignments.values().any(|&f| f >= plan.n_folds) {
            return Err(Error::Config("fold index out of range in fold plan".into()));
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::manifest_with_patients;

    #[test]
    fn ten_patients_five_folds_two_each() {
        let m = manifest_with_patients(10, 2);
        let plan = make_folds(&m, 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        assert_eq!(plan.train_fraction, (4, 5));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let m = manifest_with_patients(23, 2);
        assert_eq!(make_folds(&m, 5, 11).unwrap(), make_folds(&m, 5, 11).unwrap());
        assert_ne!(
            make_folds(&m, 5, 11).unwrap().assignments,
            make_folds(&m, 5, 12).unwrap().assignments
        );
    }

    #[test]
    fn sixty_eight_patients_give_sizes_13_or_14() {
        let m = manifest_with_patients(68, 1);
        let sizes = make_folds(&m, 5, 0).unwrap().fold_sizes();
        // 68 = 5 * 13 + 3: three folds of 14, two of 13.
        assert_eq!(sizes.iter().filter(|&&s| s == 14).count(), 3);
        assert_eq!(sizes.iter().filter(|&&s| s == 13).count(), 2);
    }

    #[test]
    fn too_few_patients_is_config_error() {
        let m = manifest_with_patients(4, 3);
        assert!(matches!(make_folds(&m, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let plan = make_folds(&manifest_with_patients(12, 1), 5, 9).unwrap();
        let path = dir.path().join("folds.json");
        plan.save(&path).unwrap();
        assert_eq!(FoldPlan::load(&path).unwrap(), plan);
    }
}
