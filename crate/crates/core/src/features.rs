//! Input-space images for good splits: per-split training averages and
//! inputs synthesized to reproduce a cluster center.

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Network};
use crate::path_analysis::{FilterParams, Path, PathModel, Split, SplitTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMethod {
    Average,
    Backprop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImage {
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub split: Option<Split>,
    pub method: FeatureMethod,
}

/// Square images when the dimension is a perfect square, a single row otherwise.
pub fn default_shape(dim: usize) -> (usize, usize) {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side, side)
    } else {
        (1, dim)
    }
}

fn check_shape(dim: usize, shape: (usize, usize)) -> Result<()> {
    if shape.0 * shape.1 != dim {
        return Err(Error::InvalidArgument(format!(
            "image shape {}x{} does not hold {dim} values",
            shape.0, shape.1
        )));
    }
    Ok(())
}

/// Coordinate-wise mean of the training inputs whose path crosses `split`.
pub fn split_mean_feature(
    split: Split,
    train_set: &Dataset,
    paths: &[Path],
    shape: (usize, usize),
) -> Result<FeatureImage> {
    if paths.len() != train_set.len() {
        return Err(Error::LengthMismatch {
            what: "paths/training points",
            left: paths.len(),
            right: train_set.len(),
        });
    }
    check_shape(train_set.dim(), shape)?;
    let mut sum = Array1::<f64>::zeros(train_set.dim());
    let mut count = 0usize;
    for (i, path) in paths.iter().enumerate() {
        let hit = path.cluster_ids.get(split.layer) == Some(&split.src)
            && path.cluster_ids.get(split.layer + 1) == Some(&split.dst);
        if hit {
            sum += &train_set.point(i);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("split"));
    }
    sum /= count as f64;
    Ok(FeatureImage {
        pixels: sum.to_vec(),
        height: shape.0,
        width: shape.1,
        split: Some(split),
        method: FeatureMethod::Average,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            steps: 300,
            adam: AdamConfig {
                step_size: 0.01,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub image: FeatureImage,
    /// Loss before each step, followed by the loss after the last step.
    pub loss_trace: Vec<f64>,
    /// Loss of the returned input (the best iterate).
    pub final_loss: f64,
}

/// Adam on the input alone, projected onto `[0,1]` after every step, towards
/// `target` at traced layer `layer`.
pub fn activation_maximization(
    net: &Network,
    layer: usize,
    target: &[f64],
    init: &[f64],
    cfg: &SynthesisConfig,
    shape: (usize, usize),
) -> Result<Synthesis> {
    cfg.adam.validate()?;
    check_shape(init.len(), shape)?;
    let mut x: Vec<f64> = init.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut adam = Adam::new(cfg.adam, &[x.len()]);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, x.clone());
    for step in 0..=cfg.steps {
        let (loss, grad) = net.layer_target_gradient(&x, layer, target)?;
        trace.push(loss);
        if loss < best.0 {
            best = (loss, x.clone());
        }
        if step == cfg.steps || loss == 0.0 {
            break;
        }
        adam.step(&mut [x.as_mut_slice()], &[grad.as_slice()]);
        for v in &mut x {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(Synthesis {
        image: FeatureImage {
            pixels: best.1,
            height: shape.0,
            width: shape.1,
            split: None,
            method: FeatureMethod::Backprop,
        },
        loss_trace: trace,
        final_loss: best.0,
    })
}

/// Both feature images of one good split. The synthesized image targets the
/// destination cluster's center at layer `split.layer + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFeatures {
    pub split: Split,
    pub average: FeatureImage,
    pub synthesized: FeatureImage,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Features for every good split under `params`. Syntheses are shared between
/// splits with the same destination cluster and start from the mean training
/// image.
pub fn extract_features(
    net: &Network,
    path_model: &PathModel,
    stats: &SplitTable,
    params: &FilterParams,
    train_set: &Dataset,
    train_paths: &[Path],
    cfg: &SynthesisConfig,
    shape: (usize, usize),
) -> Result<Vec<SplitFeatures>> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let splits: Vec<Split> = stats
        .good_splits(params)
        .into_iter()
        .filter(|s| stats.get(s).count > 0)
        .collect();
    let mean = train_set.inputs().mean_axis(ndarray::Axis(0)).expect("nonempty").to_vec();

    let targets: Vec<(usize, usize)> = splits
        .iter()
        .map(|s| (s.layer + 1, s.dst))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let syntheses: BTreeMap<(usize, usize), Synthesis> = targets
        .par_iter()
        .map(|&(layer, cluster)| {
            let center = path_model
                .layers
                .get(layer)
                .and_then(|l| l.clusters.centers.get(cluster))
                .ok_or_else(|| Error::InvalidArgument(format!("no cluster {cluster} at layer {layer}")))?;
            let s = activation_maximization(net, layer, center, &mean, cfg, shape)?;
            Ok(((layer, cluster), s))
        })
        .collect::<Result<_>>()?;

    splits
        .par_iter()
        .map(|&split| {
            let average = split_mean_feature(split, train_set, train_paths, shape)?;
            let s = &syntheses[&(split.layer + 1, split.dst)];
            let mut synthesized = s.image.clone();
            synthesized.split = Some(split);
            Ok(SplitFeatures {
                split,
                average,
                synthesized,
                initial_loss: s.loss_trace[0],
                final_loss: s.final_loss,
            })
        })
        .collect()
}
