//! Seeded stratified k-fold plans with an inner train/validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::patch::Label;
use crate::{Error, Result};

/// Indices into the dataset for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Each class is shuffled and dealt round-robin into `k` test folds. The
/// remaining samples are split per class with `val_fraction` going to
/// validation.
pub fn make_folds(labels: &[Label], k: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need k >= 2 folds, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} folds requested for {} samples",
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: [Vec<usize>; 2] = [vec![], vec![]];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let mut assignment = vec![0usize; labels.len()];
    let mut next = 0;
    for class in by_class.iter_mut() {
        class.shuffle(&mut rng);
        for &i in class.iter() {
            assignment[i] = next % k;
            next += 1;
        }
    }
    let folds = (0..k)
        .map(|f| {
            let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
            let mut train = vec![];
            let mut val = vec![];
            for class in &by_class {
                let pool: Vec<usize> = class.iter().copied().filter(|&i| assignment[i] != f).collect();
                let n_val = (pool.len() as f64 * val_fraction).round() as usize;
                let n_val = n_val.min(pool.len().saturating_sub(1));
                val.extend_from_slice(&pool[..n_val]);
                train.extend_from_slice(&pool[n_val..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            Fold {
                index: f,
                train,
                val,
                test,
            }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}
