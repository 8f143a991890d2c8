use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Bag-level fold membership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub fold_of_bag: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Indices into `dataset.bags` for the training and held-out part of `fold`,
    /// each in dataset order. Bags absent from the assignment are ignored.
    pub fn split(&self, dataset: &Dataset, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, bag) in dataset.bags.iter().enumerate() {
            match self.fold_of_bag.get(&bag.id) {
                Some(&f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {}
            }
        }
        (train, test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.fold_of_bag.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified split: each class is shuffled (after sorting by id) and dealt
/// round-robin, continuing the deal position across classes so overall fold
/// sizes differ by at most one.
pub fn split_folds(dataset: &Dataset, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::config("n_folds must be at least 2"));
    }
    let mut rng = seed::rng(seed::derive(seed, "folds"));
    let mut fold_of_bag = BTreeMap::new();
    let mut position = 0usize;
    for label in [0u8, 1u8] {
        let mut ids: Vec<&str> = dataset
            .bags
            .iter()
            .filter(|b| b.label == label)
            .map(|b| b.id.as_str())
            .collect();
        if ids.len() < n_folds {
            return Err(Error::TooFewBags {
                label,
                count: ids.len(),
                needed: n_folds,
            });
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids {
            fold_of_bag.insert(id.to_string(), position % n_folds);
            position += 1;
        }
    }
    Ok(FoldAssignment { n_folds, fold_of_bag })
}
