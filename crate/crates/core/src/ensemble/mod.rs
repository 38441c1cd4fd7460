//! Per-fold pairs of networks and the three-tier selective ensemble.

mod external;
mod partition;
mod report;
mod vote;

pub use external::{large_model_route, ExternalPredictions, ModelTag};
pub use partition::{make_partitions, Fold, PartitionScheme};
pub use report::{tier_report, TierReport, TierRow};
pub use vote::{assign_tier, good_vote, summed_argmax, Ballot, Tier, TierVerdict, VoteOutcome, VoteRule};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path as FsPath;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{Fraction, ValidationRun};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::nn::{argmax, oversample, train, Network, NetworkConfig, TrainConfig};
use crate::path_analysis::{
    classify_point, compute_paths, fit_layer, grid_search, split_stats, FilterGrid, FilterParams, GridOutcome,
    KPolicy, LayerClusters, Path, PathModel, SplitTable,
};

/// Which points the per-split accuracies are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitBasis {
    #[default]
    Train,
    Validation,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub scheme: PartitionScheme,
    pub network: NetworkConfig,
    /// Its `seed` is replaced per member.
    pub train: TrainConfig,
    /// Its `seed` is replaced per member.
    pub k_policy: KPolicy,
    pub grid: FilterGrid,
    pub target_accuracy: f64,
    pub split_basis: SplitBasis,
    pub oversample_copies: usize,
    pub vote_rule: VoteRule,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn new(scheme: PartitionScheme, network: NetworkConfig) -> Self {
        EnsembleConfig {
            scheme,
            network,
            train: TrainConfig::default(),
            k_policy: KPolicy::default(),
            grid: FilterGrid::default(),
            target_accuracy: 0.99,
            split_basis: SplitBasis::Train,
            oversample_copies: 2,
            vote_rule: VoteRule::Plurality,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::InvalidConfig(format!(
                "target accuracy {} outside [0, 1]",
                self.target_accuracy
            )));
        }
        if self.oversample_copies == 0 {
            return Err(Error::InvalidConfig("oversample copies must be at least 1".into()));
        }
        if self.scheme.fold_count() < 2 {
            return Err(Error::InvalidConfig("need at least 2 folds".into()));
        }
        Ok(())
    }
}

/// Seeds used inside one member, all derived from `seed + fold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSeeds {
    pub member: u64,
    pub init1: u64,
    pub train1: u64,
    pub init2: u64,
    pub train2: u64,
    pub clustering: u64,
}

impl MemberSeeds {
    pub fn derive(base: u64, fold: usize) -> Self {
        let member = base.wrapping_add(fold as u64);
        let stage = |s: u64| member ^ (s << 40);
        MemberSeeds {
            member,
            init1: stage(1),
            train1: stage(2),
            init2: stage(3),
            train2: stage(4),
            clustering: stage(5),
        }
    }
}

/// A trained network with its cluster paths and filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModel {
    pub network: Network,
    pub path_model: PathModel,
    pub split_table: SplitTable,
    pub grid: GridOutcome,
    pub best_epoch: usize,
    pub val_accuracy: f64,
}

/// Good/bad verdicts and class probabilities of one model on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub good: Vec<bool>,
    pub probs: Array2<f64>,
}

impl Assessment {
    pub fn ballot(&self, i: usize) -> Ballot<'_> {
        Ballot {
            good: self.good[i],
            probs: self.probs.row(i).to_slice().expect("standard layout"),
        }
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.good.len()).map(|i| argmax(self.ballot(i).probs)).collect()
    }
}

impl SubModel {
    pub fn params(&self) -> &FilterParams {
        &self.grid.params
    }

    pub fn paths(&self, inputs: ArrayView2<'_, f64>) -> Result<(Vec<Path>, Array2<f64>)> {
        let mut acts = self.network.layer_outputs(inputs)?;
        let paths = compute_paths(&self.path_model, &acts)?;
        Ok((paths, acts.pop().expect("output layer")))
    }

    pub fn assess(&self, inputs: ArrayView2<'_, f64>) -> Result<Assessment> {
        self.assess_with(inputs, self.params())
    }

    pub fn assess_with(&self, inputs: ArrayView2<'_, f64>, params: &FilterParams) -> Result<Assessment> {
        let (paths, probs) = self.paths(inputs)?;
        let good = paths
            .iter()
            .map(|p| classify_point(&self.split_table, params, p).good)
            .collect();
        Ok(Assessment { good, probs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub fold: usize,
    pub seeds: MemberSeeds,
    /// Trained normally on the fold.
    pub model1: SubModel,
    /// Retrained with model 1's bad training points repeated.
    pub model2: SubModel,
    /// Indices into the full training data.
    pub bad_train_indices: Vec<usize>,
    /// Set when either grid search fell short of the target accuracy.
    pub flagged: bool,
}

/// Depth of the model hierarchy (model 1 and model 2); deeper levels are not built.
pub const BUNDLE_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleBundle {
    pub config: EnsembleConfig,
    pub members: Vec<Member>,
}

struct Fitted {
    model: SubModel,
    train_good: Vec<bool>,
}

fn labels_of(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| argmax(r.to_slice().expect("standard layout")))
        .collect()
}

/// Trains one network and derives its path model and filter. Clusters are
/// fitted on `cluster_set`, which is the un-oversampled fold training set.
#[allow(clippy::too_many_arguments)]
fn fit_submodel(
    cfg: &EnsembleConfig,
    fit_set: &Dataset,
    cluster_set: &Dataset,
    val_set: &Dataset,
    init_seed: u64,
    train_seed: u64,
    policy: &KPolicy,
    input_layer: Option<&LayerClusters>,
) -> Result<Fitted> {
    let net = Network::init(cfg.network.clone(), init_seed)?;
    let tc = TrainConfig {
        seed: train_seed,
        ..cfg.train
    };
    let outcome = train(net, fit_set, val_set, &tc)?;
    let network = outcome.network;

    let mut acts = network.layer_outputs(cluster_set.inputs())?;
    let layers = acts
        .iter()
        .enumerate()
        .map(|(l, a)| match (l, input_layer) {
            (0, Some(reused)) => Ok(reused.clone()),
            _ => fit_layer(a, l, policy),
        })
        .collect::<Result<Vec<_>>>()?;
    let path_model = PathModel { layers };

    let train_paths = compute_paths(&path_model, &acts)?;
    let train_preds = labels_of(acts.last().expect("output layer"));
    acts.clear();

    let mut val_acts = network.layer_outputs(val_set.inputs())?;
    let val_paths = compute_paths(&path_model, &val_acts)?;
    let val_preds = labels_of(&val_acts.pop().expect("output layer"));
    drop(val_acts);

    let split_table = match cfg.split_basis {
        SplitBasis::Train => split_stats(&train_paths, cluster_set.labels(), &train_preds)?,
        SplitBasis::Validation => split_stats(&val_paths, val_set.labels(), &val_preds)?,
        SplitBasis::Both => {
            let mut t = split_stats(&train_paths, cluster_set.labels(), &train_preds)?;
            t.merge(&split_stats(&val_paths, val_set.labels(), &val_preds)?);
            t
        }
    };
    let grid = grid_search(
        &split_table,
        &val_paths,
        val_set.labels(),
        &val_preds,
        &cfg.grid,
        cfg.target_accuracy,
    )?;
    let train_good = train_paths
        .iter()
        .map(|p| classify_point(&split_table, &grid.params, p).good)
        .collect();
    Ok(Fitted {
        model: SubModel {
            network,
            path_model,
            split_table,
            grid,
            best_epoch: outcome.best_epoch,
            val_accuracy: outcome.best_val_accuracy,
        },
        train_good,
    })
}

fn train_member(data: &Dataset, fold: &Fold, index: usize, cfg: &EnsembleConfig) -> Result<Member> {
    let seeds = MemberSeeds::derive(cfg.seed, index);
    let train_set = data.subset(&fold.train)?;
    let val_set = data.subset(&fold.validation)?;
    let policy = KPolicy {
        seed: seeds.clustering,
        ..cfg.k_policy.clone()
    };
    log::info!(
        "member {index}: model 1 on {} training / {} validation points",
        train_set.len(),
        val_set.len()
    );
    let m1 = fit_submodel(cfg, &train_set, &train_set, &val_set, seeds.init1, seeds.train1, &policy, None)?;
    let bad_local: BTreeSet<usize> = m1
        .train_good
        .iter()
        .enumerate()
        .filter(|(_, &g)| !g)
        .map(|(i, _)| i)
        .collect();
    log::info!(
        "member {index}: {} of {} training points bad; model 2",
        bad_local.len(),
        train_set.len()
    );
    let boosted = oversample(&train_set, &bad_local, cfg.oversample_copies)?;
    // Layer 0 is the raw input, so model 1's input clusters carry over unchanged.
    let m2 = fit_submodel(
        cfg,
        &boosted,
        &train_set,
        &val_set,
        seeds.init2,
        seeds.train2,
        &policy,
        Some(&m1.model.path_model.layers[0]),
    )?;
    let flagged = !m1.model.grid.met_target || !m2.model.grid.met_target;
    if flagged {
        log::warn!("member {index}: grid search missed the target accuracy");
    }
    Ok(Member {
        fold: index,
        seeds,
        model1: m1.model,
        model2: m2.model,
        bad_train_indices: bad_local.iter().map(|&i| fold.train[i]).collect(),
        flagged,
    })
}

/// One member per fold, trained independently.
pub fn train_ensemble(data: &Dataset, cfg: &EnsembleConfig) -> Result<EnsembleBundle> {
    cfg.validate()?;
    if data.dim() != cfg.network.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.network.input_dim(),
            got: data.dim(),
        });
    }
    let folds = make_partitions(data.len(), cfg.scheme)?;
    let members = folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| train_member(data, fold, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleBundle {
        config: cfg.clone(),
        members,
    })
}

/// Every member's two assessments on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleAssessment {
    pub model1: Vec<Assessment>,
    pub model2: Vec<Assessment>,
}

impl BundleAssessment {
    pub fn len(&self) -> usize {
        self.model1[0].good.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn ballots(set: &[Assessment], i: usize) -> Vec<Ballot<'_>> {
        set.iter().map(|a| a.ballot(i)).collect()
    }

    pub fn model1_vote(&self, i: usize, rule: VoteRule) -> Option<VoteOutcome> {
        good_vote(&Self::ballots(&self.model1, i), rule)
    }

    pub fn verdicts(&self, rule: VoteRule) -> Vec<TierVerdict> {
        (0..self.len())
            .map(|i| assign_tier(&Self::ballots(&self.model1, i), &Self::ballots(&self.model2, i), rule))
            .collect()
    }
}

impl EnsembleBundle {
    pub fn assess(&self, inputs: ArrayView2<'_, f64>) -> Result<BundleAssessment> {
        if self.members.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        let (model1, model2) = self
            .members
            .par_iter()
            .map(|m| Ok((m.model1.assess(inputs)?, m.model2.assess(inputs)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(BundleAssessment { model1, model2 })
    }

    pub fn classify_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<TierVerdict>> {
        Ok(self.assess(inputs)?.verdicts(self.config.vote_rule))
    }

    pub fn classify(&self, x: &[f64]) -> Result<TierVerdict> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.classify_batch(row)?[0])
    }

    /// Points judged bad by strictly more than half of the model 1's.
    pub fn collect_bad_training_points(&self, data: &Dataset) -> Result<BTreeSet<usize>> {
        let assessed = self.assess(data.inputs())?;
        Ok(majority_bad(&assessed.model1))
    }

    /// Measures `v`, `f1`, `f2` and the voted errors of the model 1's on `data`.
    pub fn validation_run(&self, data: &Dataset) -> Result<ValidationRun> {
        let assessed = self.assess(data.inputs())?;
        measure_validation_run(&assessed.model1, data.labels(), self.config.vote_rule)
    }

    pub fn save(&self, dir: &FsPath) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut files = Vec::new();
        for m in &self.members {
            let name = format!("member_{}.json", m.fold);
            let path = dir.join(&name);
            write_json(&path, m)?;
            files.push(name);
            written.push(path);
        }
        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            depth: BUNDLE_DEPTH,
            config: self.config.clone(),
            members: files,
        };
        let path = dir.join("bundle.json");
        write_json(&path, &manifest)?;
        written.push(path);
        Ok(written)
    }

    pub fn load(dir: &FsPath) -> Result<Self> {
        let manifest: BundleManifest = read_json(&dir.join("bundle.json"))?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: manifest.format_version,
                supported: BUNDLE_FORMAT_VERSION,
            });
        }
        if manifest.depth != BUNDLE_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "bundle depth {} is not supported (only {BUNDLE_DEPTH})",
                manifest.depth
            )));
        }
        let members = manifest
            .members
            .iter()
            .map(|f| read_json(&dir.join(f)))
            .collect::<Result<Vec<Member>>>()?;
        if members.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        Ok(EnsembleBundle {
            config: manifest.config,
            members,
        })
    }
}

const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    depth: usize,
    config: EnsembleConfig,
    members: Vec<String>,
}

fn majority_bad(model1: &[Assessment]) -> BTreeSet<usize> {
    let m = model1.len();
    (0..model1[0].good.len())
        .filter(|&i| 2 * model1.iter().filter(|a| !a.good[i]).count() > m)
        .collect()
}

/// `v` is the largest per-model count of good but misclassified points; `f1`
/// and `f2` are the smallest good and agreeing fractions over voted points.
pub fn measure_validation_run(model1: &[Assessment], truth: &[usize], rule: VoteRule) -> Result<ValidationRun> {
    let m = model1.len();
    if m == 0 {
        return Err(Error::Empty("ensemble"));
    }
    let n = truth.len();
    if model1.iter().any(|a| a.good.len() != n) {
        return Err(Error::LengthMismatch {
            what: "assessments/labels",
            left: model1[0].good.len(),
            right: n,
        });
    }
    let v = model1
        .iter()
        .map(|a| {
            let preds = a.predictions();
            (0..n).filter(|&i| a.good[i] && preds[i] != truth[i]).count()
        })
        .max()
        .unwrap_or(0) as u64;
    let mut f1: Option<Fraction> = None;
    let mut f2: Option<Fraction> = None;
    let (mut voted, mut wrong) = (0u64, 0u64);
    for (i, &y) in truth.iter().enumerate() {
        let ballots: Vec<Ballot<'_>> = model1.iter().map(|a| a.ballot(i)).collect();
        if let Some(out) = good_vote(&ballots, rule) {
            voted += 1;
            wrong += u64::from(out.label != y);
            let a = Fraction::new(out.good_count as u64, m as u64);
            let b = Fraction::new(out.agreeing as u64, out.good_count as u64);
            f1 = Some(f1.map_or(a, |f| f.min(a)));
            f2 = Some(f2.map_or(b, |f| f.min(b)));
        }
    }
    Ok(ValidationRun {
        v,
        f1: f1.unwrap_or(Fraction::new(1, 1)),
        f2: f2.unwrap_or(Fraction::new(1, 1)),
        observed_incorrect: wrong,
        voted,
        points: n as u64,
    })
}
