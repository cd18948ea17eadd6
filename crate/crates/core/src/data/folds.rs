use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Volume};

/// Case -> fold, with every case of a patient in the same fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub num_folds: usize,
    pub fold_of_case: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn validation_cases(&self, fold: usize) -> Vec<&str> {
        self.fold_of_case
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn training_cases(&self, fold: usize) -> Vec<&str> {
        self.fold_of_case
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(c, _)| c.as_str())
            .collect()
    }
}

/// Shuffle the distinct patients under `seed` and deal them round-robin.
pub fn assign_folds_by_patient<'a>(
    cases: impl IntoIterator<Item = (&'a str, &'a str)>,
    num_folds: usize,
    seed: u64,
) -> Result<FoldAssignment, DataError> {
    if num_folds < 2 {
        return Err(DataError::InvalidParameter(format!(
            "need at least 2 folds, got {num_folds}"
        )));
    }
    let cases: Vec<(&str, &str)> = cases.into_iter().collect();
    let mut patients: Vec<&str> = cases
        .iter()
        .map(|(_, p)| *p)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < num_folds {
        return Err(DataError::TooFewPatients {
            patients: patients.len(),
            folds: num_folds,
        });
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of_patient: BTreeMap<&str, usize> =
        patients.iter().enumerate().map(|(i, p)| (*p, i % num_folds)).collect();
    let fold_of_case = cases.iter().map(|(c, p)| (c.to_string(), fold_of_patient[p])).collect();
    Ok(FoldAssignment {
        num_folds,
        fold_of_case,
    })
}

pub fn assign_folds(volumes: &[Volume], num_folds: usize, seed: u64) -> Result<FoldAssignment, DataError> {
    assign_folds_by_patient(
        volumes.iter().map(|v| (v.case_id.as_str(), v.patient_id.as_str())),
        num_folds,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cases(patients: usize, total: usize) -> Vec<(String, String)> {
        (0..total)
            .map(|i| {
                let p = if i < patients { i } else { (i * 7) % patients };
                (format!("case{i}"), format!("pat{p}"))
            })
            .collect()
    }

    fn patient_counts(a: &FoldAssignment, cs: &[(String, String)]) -> Vec<usize> {
        let mut per_fold = vec![BTreeSet::new(); a.num_folds];
        for (c, p) in cs {
            per_fold[a.fold_of_case[c]].insert(p.clone());
        }
        per_fold.iter().map(BTreeSet::len).collect()
    }

    #[test]
    fn ten_patients_five_folds() {
        let cs = cases(10, 10);
        let a = assign_folds_by_patient(cs.iter().map(|(c, p)| (c.as_str(), p.as_str())), 5, 0).unwrap();
        assert_eq!(patient_counts(&a, &cs), vec![2; 5]);
    }

    #[test]
    fn nine_hundred_patients() {
        let cs = cases(900, 1014);
        let a = assign_folds_by_patient(cs.iter().map(|(c, p)| (c.as_str(), p.as_str())), 5, 42).unwrap();
        assert_eq!(patient_counts(&a, &cs), vec![180; 5]);
        assert_eq!(a.fold_of_case.len(), 1014);
        for (c, p) in &cs {
            let f = a.fold_of_case[c];
            assert!(cs.iter().filter(|(_, q)| q == p).all(|(d, _)| a.fold_of_case[d] == f));
        }
    }

    #[test]
    fn too_few_patients() {
        let cs = cases(3, 6);
        let r = assign_folds_by_patient(cs.iter().map(|(c, p)| (c.as_str(), p.as_str())), 5, 0);
        assert!(matches!(r, Err(DataError::TooFewPatients { patients: 3, folds: 5 })));
    }
}
