use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_case_ids: Vec<String>,
    pub val_case_ids: Vec<String>,
}

/// Shuffle by `seed`, then deal cases round-robin into `n_folds` validation
/// sets. Id lists keep the input order.
pub fn make_folds(case_ids: &[String], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if case_ids.len() < n_folds {
        return Err(Error::Config(format!(
            "{} cases are too few for {n_folds} folds",
            case_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; case_ids.len()];
    for (pos, &case) in order.iter().enumerate() {
        fold_of[case] = pos % n_folds;
    }
    Ok((0..n_folds)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) = case_ids
                .iter()
                .zip(&fold_of)
                .partition(|(_, &fo)| fo == f);
            FoldSplit {
                fold_index: f,
                train_case_ids: train.into_iter().map(|(id, _)| id.clone()).collect(),
                val_case_ids: val.into_iter().map(|(id, _)| id.clone()).collect(),
            }
        })
        .collect())
}

/// Validation DSC per fold (rows) and loss group (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub groups: Vec<String>,
    pub dsc: Vec<Vec<Option<f64>>>,
}

/// Best group per fold; ties go to the earlier group.
pub fn select_best_per_fold(table: &SelectionTable) -> Result<Vec<(usize, String)>> {
    if table.groups.is_empty() || table.dsc.is_empty() {
        return Err(Error::Config("selection table is empty".into()));
    }
    table
        .dsc
        .iter()
        .enumerate()
        .map(|(fold, row)| {
            if row.len() != table.groups.len() {
                return Err(Error::Config(format!(
                    "fold {fold} has {} entries for {} groups",
                    row.len(),
                    table.groups.len()
                )));
            }
            let mut best: Option<(usize, f64)> = None;
            for (g, v) in row.iter().enumerate() {
                let v = v
                    .filter(|v| !v.is_nan())
                    .ok_or_else(|| Error::Config(format!("missing DSC for fold {fold}, group {}", table.groups[g])))?;
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let (g, _) = best.expect("nonempty row");
            Ok((fold, table.groups[g].clone()))
        })
        .collect()
}
