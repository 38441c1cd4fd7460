//! Gaussian blobs in the unit cube, for smoke runs and tests.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub points: usize,
    pub classes: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around each class center.
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            points: 200,
            classes: 3,
            dim: 4,
            spread: 0.08,
            seed: 0,
        }
    }
}

/// Class centers uniform in `[0.2, 0.8]^dim`, points clamped to `[0, 1]`,
/// classes balanced and order shuffled.
pub fn blobs(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.points == 0 || cfg.classes == 0 || cfg.dim == 0 {
        return Err(Error::InvalidConfig("blob sizes must be positive".into()));
    }
    let noise = Normal::new(0.0, cfg.spread)
        .map_err(|e| Error::InvalidConfig(format!("blob spread: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let mut labels: Vec<usize> = (0..cfg.points).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Array2::zeros((cfg.points, cfg.dim));
    for (mut row, &y) in inputs.rows_mut().into_iter().zip(&labels) {
        for (v, c) in row.iter_mut().zip(&centers[y]) {
            *v = (c + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Dataset::new(inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_range_and_determinism() {
        let cfg = BlobConfig::default();
        let a = blobs(&cfg).unwrap();
        assert_eq!((a.len(), a.dim(), a.num_classes()), (200, 4, 3));
        assert!(a.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, blobs(&cfg).unwrap());
        assert_ne!(a, blobs(&BlobConfig { seed: 1, ..cfg }).unwrap());
    }
}
