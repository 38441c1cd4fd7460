use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the training data is split into folds; each fold's validation set is
/// disjoint from every other fold's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PartitionScheme {
    /// Contiguous validation blocks of `⌈n/folds⌉` points; the last may be short.
    Block { folds: usize },
    /// Fold `i` validates on the indices congruent to `i` mod `modulus`.
    Stride { modulus: usize },
}

impl PartitionScheme {
    pub fn fold_count(&self) -> usize {
        match *self {
            PartitionScheme::Block { folds } => folds,
            PartitionScheme::Stride { modulus } => modulus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

pub fn make_partitions(n: usize, scheme: PartitionScheme) -> Result<Vec<Fold>> {
    let f = scheme.fold_count();
    if f < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {f}")));
    }
    let fold_of: Box<dyn Fn(usize) -> usize> = match scheme {
        PartitionScheme::Block { folds } => {
            let size = n.div_ceil(folds);
            Box::new(move |j| j / size.max(1))
        }
        PartitionScheme::Stride { modulus } => Box::new(move |j| j % modulus),
    };
    let mut out: Vec<Fold> = (0..f)
        .map(|_| Fold {
            train: Vec::new(),
            validation: Vec::new(),
        })
        .collect();
    for j in 0..n {
        let home = fold_of(j);
        for (i, fold) in out.iter_mut().enumerate() {
            if i == home {
                fold.validation.push(j);
            } else {
                fold.train.push(j);
            }
        }
    }
    if let Some(i) = out.iter().position(|fold| fold.validation.is_empty()) {
        return Err(Error::InvalidConfig(format!(
            "fold {i} of {f} has no validation points for n = {n}"
        )));
    }
    Ok(out)
}
