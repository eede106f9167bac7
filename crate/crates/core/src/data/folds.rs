use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, PhenotypeKind};
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scalar::Scalar;

/// Subject-level assignment of a dataset to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
    pub stratify_label: Option<String>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    /// Subjects held out in `fold`, sorted.
    pub fn test_subjects(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Subjects used for training when `fold` is held out, sorted.
    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Returns `(train, test)` and fails hard if they share a subject.
    pub fn train_test(&self, fold: usize) -> Result<(Vec<String>, Vec<String>)> {
        let train = self.train_subjects(fold);
        let test = self.test_subjects(fold);
        let train_set: BTreeSet<&String> = train.iter().collect();
        if let Some(s) = test.iter().find(|s| train_set.contains(s)) {
            return Err(Error::Leakage(format!("subject {s} appears in train and test of fold {fold}")));
        }
        Ok((train, test))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Assigns subjects to folds, optionally stratified by a categorical phenotype.
///
/// Subjects are shuffled with a seeded stream and dealt round-robin. With
/// stratification each class is dealt separately; the leftover subjects of a
/// class go to the currently smallest folds (lowest index on ties), never two
/// leftovers of one class to the same fold.
pub fn make_folds<T: Scalar>(
    dataset: &Dataset<T>,
    k: usize,
    stratify: Option<&str>,
    seed: u64,
) -> Result<FoldSplit> {
    let subjects = dataset.subjects();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if k > subjects.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds subject count {}",
            subjects.len()
        )));
    }

    let groups: Vec<Vec<String>> = match stratify {
        None => vec![subjects],
        Some(name) => {
            let p = dataset.phenotypes.get(name)?;
            if p.kind != PhenotypeKind::Categorical {
                return Err(Error::InvalidArgument(format!(
                    "cannot stratify on continuous phenotype {name}"
                )));
            }
            let mut by_class: BTreeMap<u64, Vec<String>> = BTreeMap::new();
            for s in subjects {
                let v = dataset.phenotypes.value(name, &s)?;
                by_class.entry(v as u64).or_default().push(s);
            }
            by_class.into_values().collect()
        }
    };

    let mut assignment = BTreeMap::new();
    let mut sizes = vec![0usize; k];
    for (gi, mut group) in groups.into_iter().enumerate() {
        let mut rng = rng::stream(seed, &[domain::FOLDS, gi as u64]);
        group.shuffle(&mut rng);
        let full = group.len() / k * k;
        for (i, s) in group[..full].iter().enumerate() {
            assignment.insert(s.clone(), i % k);
            sizes[i % k] += 1;
        }
        let mut used = vec![false; k];
        for s in &group[full..] {
            let fold = (0..k)
                .filter(|&f| !used[f])
                .min_by_key(|&f| (sizes[f], f))
                .expect("fewer leftovers than folds");
            used[fold] = true;
            sizes[fold] += 1;
            assignment.insert(s.clone(), fold);
        }
    }

    Ok(FoldSplit {
        k,
        assignment,
        stratify_label: stratify.map(str::to_owned),
        seed,
    })
}
