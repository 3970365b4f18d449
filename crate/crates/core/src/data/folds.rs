use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint class partition for cross-validation over novel classes. Fold
/// `i` holds out `folds[i]` for testing and trains on the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    folds: Vec<Vec<u32>>,
}

/// Contiguous even split of the sorted class ids.
pub fn make_folds(class_ids: &[u32], n_folds: usize) -> Result<FoldSpec> {
    let ids: BTreeSet<u32> = class_ids.iter().copied().collect();
    if ids.len() != class_ids.len() {
        return Err(Error::Config("duplicate class ids".into()));
    }
    if n_folds == 0 || ids.is_empty() || ids.len() % n_folds != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot be split evenly into {n_folds} folds",
            ids.len()
        )));
    }
    let ids: Vec<u32> = ids.into_iter().collect();
    let per = ids.len() / n_folds;
    Ok(FoldSpec {
        folds: ids.chunks(per).map(<[u32]>::to_vec).collect(),
    })
}

impl FoldSpec {
    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn all_classes(&self) -> Vec<u32> {
        self.folds.concat()
    }

    pub fn test_classes(&self, fold: usize) -> Result<&[u32]> {
        self.folds.get(fold).map(Vec::as_slice).ok_or_else(|| {
            Error::Config(format!("fold {fold} out of range 0..{}", self.folds.len()))
        })
    }

    pub fn train_classes(&self, fold: usize) -> Result<Vec<u32>> {
        self.test_classes(fold)?;
        Ok(self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect())
    }
}
