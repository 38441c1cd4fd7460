//! Cluster paths through a network's layers, split statistics, and the
//! three-threshold filter that separates "good" points from "bad" ones.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clustering::{elbow_select, kmeans, ClusterSet, ElbowCurve};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ActivationTrace, Network};

/// How many means to fit per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPolicy {
    /// Elbow candidates; `None` means `1..=min(20, n/10)`.
    #[serde(default)]
    pub candidates: Option<Vec<usize>>,
    /// Restarts per candidate while tracing the elbow curve.
    pub elbow_restarts: usize,
    /// Restarts for the final fit at the selected k.
    pub restarts: usize,
    pub seed: u64,
    /// Fixed k per layer index, bypassing the elbow.
    #[serde(default)]
    pub overrides: BTreeMap<usize, usize>,
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy {
            candidates: None,
            elbow_restarts: 3,
            restarts: 5,
            seed: 0,
            overrides: BTreeMap::new(),
        }
    }
}

impl KPolicy {
    pub fn candidates_for(&self, n: usize) -> Vec<usize> {
        match &self.candidates {
            Some(c) => c.clone(),
            None => (1..=(n / 10).clamp(1, 20)).collect(),
        }
    }

    fn layer_seed(&self, layer: usize) -> u64 {
        self.seed.wrapping_add(1_000 * layer as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClusters {
    pub clusters: ClusterSet,
    /// Absent when the layer's k came from an override.
    pub elbow: Option<ElbowCurve>,
}

/// One cluster set per traced layer (input, hidden..., output), all fitted on
/// the same training activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathModel {
    pub layers: Vec<LayerClusters>,
}

pub fn build_path_model(net: &Network, train_set: &Dataset, policy: &KPolicy) -> Result<PathModel> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let acts = net.layer_outputs(train_set.inputs())?;
    build_path_model_from_activations(&acts, policy)
}

/// Fits one layer; shared by [`build_path_model_from_activations`] and by
/// callers that can reuse a layer fitted elsewhere.
pub fn fit_layer(acts: &Array2<f64>, layer: usize, policy: &KPolicy) -> Result<LayerClusters> {
    let seed = policy.layer_seed(layer);
    let (k, elbow) = match policy.overrides.get(&layer) {
        Some(&k) => (k, None),
        None => {
            let candidates = policy.candidates_for(acts.nrows());
            let curve = elbow_select(acts.view(), &candidates, seed, policy.elbow_restarts)?;
            (curve.selected, Some(curve))
        }
    };
    let clusters = kmeans(acts.view(), k, seed, policy.restarts)?;
    log::debug!(
        "layer {layer}: k = {k}, inertia {:.4}, mean distance {:.4}",
        clusters.inertia,
        clusters.mean_center_distance
    );
    Ok(LayerClusters { clusters, elbow })
}

pub fn build_path_model_from_activations(acts: &[Array2<f64>], policy: &KPolicy) -> Result<PathModel> {
    if acts.is_empty() || acts[0].nrows() == 0 {
        return Err(Error::Empty("activations"));
    }
    let layers = acts
        .iter()
        .enumerate()
        .map(|(l, a)| fit_layer(a, l, policy))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathModel { layers })
}

impl PathModel {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.clusters.k).collect()
    }
}

/// Cluster id and normalized center distance per layer for one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub cluster_ids: Vec<usize>,
    pub normalized_distances: Vec<f64>,
}

impl Path {
    pub fn splits(&self) -> impl Iterator<Item = Split> + '_ {
        self.cluster_ids.windows(2).enumerate().map(|(layer, w)| Split {
            layer,
            src: w[0],
            dst: w[1],
        })
    }
}

pub fn compute_path(pm: &PathModel, trace: &ActivationTrace) -> Result<Path> {
    if trace.layers.len() != pm.layer_count() {
        return Err(Error::LengthMismatch {
            what: "trace layers vs path model layers",
            left: trace.layers.len(),
            right: pm.layer_count(),
        });
    }
    let mut cluster_ids = Vec::with_capacity(pm.layer_count());
    let mut normalized_distances = Vec::with_capacity(pm.layer_count());
    for (layer, act) in pm.layers.iter().zip(&trace.layers) {
        let a = layer.clusters.assign(act)?;
        cluster_ids.push(a.cluster);
        normalized_distances.push(a.normalized);
    }
    Ok(Path {
        cluster_ids,
        normalized_distances,
    })
}

/// Paths for every row of per-layer activation matrices.
pub fn compute_paths(pm: &PathModel, acts: &[Array2<f64>]) -> Result<Vec<Path>> {
    if acts.len() != pm.layer_count() {
        return Err(Error::LengthMismatch {
            what: "activation layers vs path model layers",
            left: acts.len(),
            right: pm.layer_count(),
        });
    }
    let n = acts[0].nrows();
    let per_layer = pm
        .layers
        .par_iter()
        .zip(acts.par_iter())
        .map(|(layer, a)| {
            a.rows()
                .into_iter()
                .map(|r| layer.clusters.assign(r.as_slice().expect("contiguous row")))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .map(|i| Path {
            cluster_ids: per_layer.iter().map(|l| l[i].cluster).collect(),
            normalized_distances: per_layer.iter().map(|l| l[i].normalized).collect(),
        })
        .collect())
}

/// Transition from cluster `src` at layer `layer` to cluster `dst` at `layer + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Split {
    pub layer: usize,
    pub src: usize,
    pub dst: usize,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.layer, self.src, self.dst)
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let parse = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad split key {s:?}")))
        };
        match parts.as_slice() {
            [l, a, b] => Ok(Split {
                layer: parse(l)?,
                src: parse(a)?,
                dst: parse(b)?,
            }),
            _ => Err(Error::InvalidArgument(format!("bad split key {s:?}"))),
        }
    }
}

impl Serialize for Split {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitStats {
    pub count: usize,
    pub correct: usize,
}

impl SplitStats {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Statistics of every observed split. Unobserved splits count as zero points
/// with zero accuracy.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitTable {
    pub splits: BTreeMap<Split, SplitStats>,
}

impl SplitTable {
    pub fn get(&self, split: &Split) -> SplitStats {
        self.splits.get(split).copied().unwrap_or_default()
    }

    pub fn merge(&mut self, other: &SplitTable) {
        for (split, s) in &other.splits {
            let e = self.splits.entry(*split).or_default();
            e.count += s.count;
            e.correct += s.correct;
        }
    }

    /// Observed splits passing the count and accuracy thresholds.
    pub fn good_splits(&self, params: &FilterParams) -> Vec<Split> {
        self.splits
            .iter()
            .filter(|(_, s)| s.count >= params.min_split_count && s.accuracy() >= params.min_split_accuracy)
            .map(|(k, _)| *k)
            .collect()
    }
}

pub fn split_stats(paths: &[Path], labels: &[usize], predictions: &[usize]) -> Result<SplitTable> {
    if paths.len() != labels.len() || labels.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            what: "paths/labels/predictions",
            left: paths.len(),
            right: labels.len().min(predictions.len()),
        });
    }
    let mut table = SplitTable::default();
    for ((path, &y), &p) in paths.iter().zip(labels).zip(predictions) {
        for split in path.splits() {
            let e = table.splits.entry(split).or_default();
            e.count += 1;
            e.correct += usize::from(y == p);
        }
    }
    Ok(table)
}

/// Thresholds defining a "good" point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// In units of each layer's mean center distance. May be +∞.
    #[serde(with = "float_or_inf")]
    pub max_norm_distance: f64,
    pub min_split_count: usize,
    pub min_split_accuracy: f64,
}

impl FilterParams {
    /// Thresholds every point passes.
    pub fn vacuous() -> Self {
        FilterParams {
            max_norm_distance: f64::INFINITY,
            min_split_count: 0,
            min_split_accuracy: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_norm_distance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "max_norm_distance must be positive, got {}",
                self.max_norm_distance
            )));
        }
        if !(0.0..=1.0).contains(&self.min_split_accuracy) {
            return Err(Error::InvalidArgument(format!(
                "min_split_accuracy {} outside [0, 1]",
                self.min_split_accuracy
            )));
        }
        Ok(())
    }

    /// Whether `self` is at least as strict as `other` in every threshold.
    pub fn at_least_as_tight_as(&self, other: &FilterParams) -> bool {
        self.max_norm_distance <= other.max_norm_distance
            && self.min_split_count >= other.min_split_count
            && self.min_split_accuracy >= other.min_split_accuracy
    }
}

pub(crate) mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {t:?}"))),
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(Deserialize)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                if x.is_infinite() && *x > 0.0 {
                    seq.serialize_element("inf")?;
                } else {
                    seq.serialize_element(x)?;
                }
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "layer", rename_all = "snake_case")]
pub enum FilterFailure {
    /// Too far from its center at this layer.
    Distance(usize),
    /// The split leaving this layer has too few training points.
    SmallSplit(usize),
    /// The split leaving this layer has too low accuracy.
    LowAccuracySplit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub good: bool,
    pub first_failure: Option<FilterFailure>,
}

/// Layers are scanned in order; at each layer the distance is checked first,
/// then the count and accuracy of the split leaving it.
pub fn classify_point(stats: &SplitTable, params: &FilterParams, path: &Path) -> Verdict {
    let layers = path.cluster_ids.len();
    for l in 0..layers {
        if !(path.normalized_distances[l] <= params.max_norm_distance) {
            return bad(FilterFailure::Distance(l));
        }
        if l + 1 < layers {
            let s = stats.get(&Split {
                layer: l,
                src: path.cluster_ids[l],
                dst: path.cluster_ids[l + 1],
            });
            if s.count < params.min_split_count {
                return bad(FilterFailure::SmallSplit(l));
            }
            if s.accuracy() < params.min_split_accuracy {
                return bad(FilterFailure::LowAccuracySplit(l));
            }
        }
    }
    Verdict {
        good: true,
        first_failure: None,
    }
}

fn bad(reason: FilterFailure) -> Verdict {
    Verdict {
        good: false,
        first_failure: Some(reason),
    }
}

/// Candidate values per threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterGrid {
    #[serde(with = "float_or_inf::vec")]
    pub max_norm_distance: Vec<f64>,
    pub min_split_count: Vec<usize>,
    pub min_split_accuracy: Vec<f64>,
}

impl Default for FilterGrid {
    fn default() -> Self {
        FilterGrid {
            max_norm_distance: vec![1.0, 1.25, 1.5, 2.0, 3.0],
            min_split_count: vec![1, 5, 10, 25, 50],
            min_split_accuracy: vec![0.8, 0.9, 0.95, 0.98, 0.99],
        }
    }
}

impl FilterGrid {
    pub fn triples(&self) -> Vec<FilterParams> {
        let mut out = Vec::new();
        for &d in &self.max_norm_distance {
            for &c in &self.min_split_count {
                for &a in &self.min_split_accuracy {
                    out.push(FilterParams {
                        max_norm_distance: d,
                        min_split_count: c,
                        min_split_accuracy: a,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub params: FilterParams,
    pub retained_count: usize,
    /// Accuracy on the retained validation points (0 when none are retained).
    pub retained_accuracy: f64,
    pub met_target: bool,
    pub evaluated: usize,
}

/// Per-point summary of a path: the worst value along it for each threshold.
#[derive(Debug, Clone, Copy)]
struct PathSummary {
    max_distance: f64,
    min_count: usize,
    min_accuracy: f64,
    correct: bool,
}

impl PathSummary {
    fn passes(&self, p: &FilterParams) -> bool {
        self.max_distance <= p.max_norm_distance
            && self.min_count >= p.min_split_count
            && self.min_accuracy >= p.min_split_accuracy
    }
}

fn summarize(stats: &SplitTable, path: &Path, correct: bool) -> PathSummary {
    let mut min_count = usize::MAX;
    let mut min_accuracy = f64::INFINITY;
    for split in path.splits() {
        let s = stats.get(&split);
        min_count = min_count.min(s.count);
        min_accuracy = min_accuracy.min(s.accuracy());
    }
    let max_distance = if path.normalized_distances.iter().any(|d| d.is_nan()) {
        f64::NAN
    } else {
        path.normalized_distances
            .iter()
            .fold(f64::NEG_INFINITY, |m, &d| m.max(d))
    };
    PathSummary {
        max_distance,
        min_count,
        min_accuracy,
        correct,
    }
}

/// Ordering key for "tighter": smaller distance, then larger count, then larger accuracy.
fn tighter(a: &FilterParams, b: &FilterParams) -> std::cmp::Ordering {
    a.max_norm_distance
        .total_cmp(&b.max_norm_distance)
        .then(b.min_split_count.cmp(&a.min_split_count))
        .then(b.min_split_accuracy.total_cmp(&a.min_split_accuracy))
}

/// Evaluates every grid triple on the validation paths. Among triples whose
/// retained accuracy reaches `target_accuracy`, the one retaining the most
/// points wins, ties going to the tighter triple. If none reaches the target,
/// the triple with the highest retained accuracy is returned with
/// `met_target = false`.
pub fn grid_search(
    stats: &SplitTable,
    val_paths: &[Path],
    val_labels: &[usize],
    val_predictions: &[usize],
    grid: &FilterGrid,
    target_accuracy: f64,
) -> Result<GridOutcome> {
    if val_paths.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if val_paths.len() != val_labels.len() || val_labels.len() != val_predictions.len() {
        return Err(Error::LengthMismatch {
            what: "validation paths/labels/predictions",
            left: val_paths.len(),
            right: val_labels.len().min(val_predictions.len()),
        });
    }
    let triples = grid.triples();
    if triples.is_empty() {
        return Err(Error::Empty("filter grid"));
    }
    for t in &triples {
        t.validate()?;
    }
    let summaries: Vec<PathSummary> = val_paths
        .iter()
        .zip(val_labels.iter().zip(val_predictions))
        .map(|(p, (y, yhat))| summarize(stats, p, y == yhat))
        .collect();

    let evaluated: Vec<(usize, usize)> = triples
        .par_iter()
        .map(|t| {
            summaries.iter().fold((0, 0), |(kept, ok), s| {
                if s.passes(t) {
                    (kept + 1, ok + usize::from(s.correct))
                } else {
                    (kept, ok)
                }
            })
        })
        .collect();

    let accuracy = |(kept, ok): (usize, usize)| if kept == 0 { 0.0 } else { ok as f64 / kept as f64 };

    let mut best: Option<usize> = None;
    for (i, &e) in evaluated.iter().enumerate() {
        if e.0 == 0 || accuracy(e) < target_accuracy {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let better = e.0 > evaluated[b].0
                    || (e.0 == evaluated[b].0 && tighter(&triples[i], &triples[b]).is_lt());
                Some(if better { i } else { b })
            }
        };
    }
    let met_target = best.is_some();
    let chosen = best.unwrap_or_else(|| {
        let mut b = 0;
        for (i, &e) in evaluated.iter().enumerate().skip(1) {
            let (ai, ab) = (accuracy(e), accuracy(evaluated[b]));
            let better = ai > ab
                || (ai == ab && e.0 > evaluated[b].0)
                || (ai == ab && e.0 == evaluated[b].0 && tighter(&triples[i], &triples[b]).is_lt());
            if better {
                b = i;
            }
        }
        b
    });
    if !met_target {
        log::warn!(
            "no grid triple reaches validation accuracy {target_accuracy}; best is {:.4}",
            accuracy(evaluated[chosen])
        );
    }
    Ok(GridOutcome {
        params: triples[chosen],
        retained_count: evaluated[chosen].0,
        retained_accuracy: accuracy(evaluated[chosen]),
        met_target,
        evaluated: triples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::nn::NetworkConfig;

    fn path(ids: &[usize], d: &[f64]) -> Path {
        Path {
            cluster_ids: ids.to_vec(),
            normalized_distances: d.to_vec(),
        }
    }

    #[test]
    fn split_key_round_trip() {
        let s = Split { layer: 2, src: 5, dst: 0 };
        assert_eq!(s.to_string(), "2:5:0");
        assert_eq!("2:5:0".parse::<Split>().unwrap(), s);
        assert!("2:5".parse::<Split>().is_err());
        let mut t = SplitTable::default();
        t.splits.insert(s, SplitStats { count: 3, correct: 2 });
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"2:5:0":{"count":3,"correct":2}}"#);
        assert_eq!(serde_json::from_str::<SplitTable>(&json).unwrap(), t);
    }

    #[test]
    fn single_point_has_two_splits() {
        let paths = vec![path(&[0, 1, 2], &[0.0; 3])];
        let t = split_stats(&paths, &[3], &[4]).unwrap();
        assert_eq!(t.splits.len(), 2);
        for s in t.splits.values() {
            assert_eq!(s.count, 1);
            assert_eq!(s.accuracy(), 0.0);
        }
        assert!(split_stats(&paths, &[1, 2], &[1]).is_err());
    }

    #[test]
    fn split_counts_are_conserved_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let paths: Vec<Path> = (0..300)
            .map(|_| path(&(0..5).map(|_| rng.gen_range(0..4)).collect::<Vec<_>>(), &[0.0; 5]))
            .collect();
        let labels: Vec<usize> = (0..300).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<usize> = (0..300).map(|_| rng.gen_range(0..3)).collect();
        let t = split_stats(&paths, &labels, &preds).unwrap();
        for l in 0..4 {
            let total: usize = t.splits.iter().filter(|(s, _)| s.layer == l).map(|(_, v)| v.count).sum();
            assert_eq!(total, 300);
        }
        let all_correct = split_stats(&paths, &labels, &labels).unwrap();
        assert!(all_correct.splits.values().all(|s| s.accuracy() == 1.0));
    }

    #[test]
    fn vacuous_params_accept_everything() {
        let t = SplitTable::default();
        let v = classify_point(&t, &FilterParams::vacuous(), &path(&[0, 3, 1], &[9.0, 1e9, 0.0]));
        assert!(v.good);
        assert_eq!(v.first_failure, None);
    }

    #[test]
    fn unseen_split_is_small() {
        let t = SplitTable::default();
        let params = FilterParams {
            min_split_count: 1,
            ..FilterParams::vacuous()
        };
        let v = classify_point(&t, &params, &path(&[0, 1], &[0.0, 0.0]));
        assert_eq!(v.first_failure, Some(FilterFailure::SmallSplit(0)));
    }

    #[test]
    fn reports_first_failure_in_layer_order() {
        let mut t = SplitTable::default();
        t.splits.insert(Split { layer: 0, src: 0, dst: 0 }, SplitStats { count: 10, correct: 5 });
        let params = FilterParams {
            max_norm_distance: 1.0,
            min_split_count: 2,
            min_split_accuracy: 0.9,
        };
        let v = classify_point(&t, &params, &path(&[0, 0, 0], &[0.5, 0.5, 3.0]));
        assert_eq!(v.first_failure, Some(FilterFailure::LowAccuracySplit(0)));
        let v = classify_point(&t, &params, &path(&[0, 0, 0], &[1.5, 0.5, 0.0]));
        assert_eq!(v.first_failure, Some(FilterFailure::Distance(0)));
    }

    fn random_table(rng: &mut ChaCha8Rng, layers: usize, k: usize) -> SplitTable {
        let mut t = SplitTable::default();
        for l in 0..layers - 1 {
            for a in 0..k {
                for b in 0..k {
                    if rng.gen_bool(0.8) {
                        let count = rng.gen_range(0..30);
                        let correct = rng.gen_range(0..=count);
                        t.splits.insert(Split { layer: l, src: a, dst: b }, SplitStats { count, correct });
                    }
                }
            }
        }
        t
    }

    fn random_path(rng: &mut ChaCha8Rng, layers: usize, k: usize) -> Path {
        path(
            &(0..layers).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>(),
            &(0..layers).map(|_| rng.gen_range(0.0..3.0)).collect::<Vec<_>>(),
        )
    }

    fn oracle_good(t: &SplitTable, p: &FilterParams, path: &Path) -> bool {
        let dist_ok = path.normalized_distances.iter().all(|&d| d <= p.max_norm_distance);
        let splits_ok = (0..path.cluster_ids.len() - 1).all(|l| {
            let key = Split { layer: l, src: path.cluster_ids[l], dst: path.cluster_ids[l + 1] };
            let (count, acc) = match t.splits.get(&key) {
                Some(s) => (s.count, if s.count == 0 { 0.0 } else { s.correct as f64 / s.count as f64 }),
                None => (0, 0.0),
            };
            count >= p.min_split_count && acc >= p.min_split_accuracy
        });
        dist_ok && splits_ok
    }

    #[test]
    fn verdicts_match_direct_predicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let t = random_table(&mut rng, 4, 3);
            let p = FilterParams {
                max_norm_distance: rng.gen_range(0.1..3.0),
                min_split_count: rng.gen_range(0..20),
                min_split_accuracy: rng.gen_range(0.0..1.0),
            };
            let path = random_path(&mut rng, 4, 3);
            let v = classify_point(&t, &p, &path);
            assert_eq!(v.good, oracle_good(&t, &p, &path));
            assert_eq!(v.good, v.first_failure.is_none());
        }
    }

    proptest! {
        #[test]
        fn tightening_never_turns_bad_into_good(
            seed in any::<u64>(),
            d in 0.1f64..3.0, c in 0usize..20, a in 0.0f64..1.0,
            dd in 0.0f64..1.0, dc in 0usize..10, da in 0.0f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_table(&mut rng, 4, 3);
            let path = random_path(&mut rng, 4, 3);
            let loose = FilterParams { max_norm_distance: d, min_split_count: c, min_split_accuracy: a };
            let tight = FilterParams {
                max_norm_distance: (d - dd).max(1e-3),
                min_split_count: c + dc,
                min_split_accuracy: (a + da).min(1.0),
            };
            prop_assert!(tight.at_least_as_tight_as(&loose));
            let vl = classify_point(&t, &loose, &path);
            let vt = classify_point(&t, &tight, &path);
            prop_assert!(!(vt.good && !vl.good));
        }
    }

    fn grid_fixture(seed: u64) -> (SplitTable, Vec<Path>, Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng, 3, 3);
        let paths: Vec<Path> = (0..80).map(|_| random_path(&mut rng, 3, 3)).collect();
        let labels: Vec<usize> = (0..80).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| if rng.gen_bool(0.8) { y } else { (y + 1) % 3 })
            .collect();
        (t, paths, labels, preds)
    }

    fn small_grid() -> FilterGrid {
        FilterGrid {
            max_norm_distance: vec![1.0, 2.0, 3.0],
            min_split_count: vec![0, 5, 10],
            min_split_accuracy: vec![0.0, 0.5, 0.8],
        }
    }

    #[test]
    fn grid_search_matches_exhaustive_reevaluation() {
        for seed in 0..20 {
            let (t, paths, labels, preds) = grid_fixture(seed);
            let grid = small_grid();
            let target = 0.85;
            let got = grid_search(&t, &paths, &labels, &preds, &grid, target).unwrap();

            // exhaustive oracle over the 27 triples using classify_point directly
            let mut rows = Vec::new();
            for p in grid.triples() {
                let kept: Vec<usize> = (0..paths.len())
                    .filter(|&i| classify_point(&t, &p, &paths[i]).good)
                    .collect();
                let ok = kept.iter().filter(|&&i| labels[i] == preds[i]).count();
                let acc = if kept.is_empty() { 0.0 } else { ok as f64 / kept.len() as f64 };
                rows.push((p, kept.len(), acc));
            }
            let qualifying: Vec<_> = rows.iter().filter(|r| r.1 > 0 && r.2 >= target).collect();
            let expected = if qualifying.is_empty() {
                let best_acc = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
                let pool: Vec<_> = rows.iter().filter(|r| r.2 == best_acc).collect();
                let most = pool.iter().map(|r| r.1).max().unwrap();
                pool.into_iter().filter(|r| r.1 == most).min_by(|a, b| tighter(&a.0, &b.0)).unwrap()
            } else {
                let most = qualifying.iter().map(|r| r.1).max().unwrap();
                *qualifying.iter().filter(|r| r.1 == most).min_by(|a, b| tighter(&a.0, &b.0)).unwrap()
            };
            assert_eq!(got.params, expected.0, "seed {seed}");
            assert_eq!(got.retained_count, expected.1);
            assert_eq!(got.retained_accuracy, expected.2);
            assert_eq!(got.met_target, !qualifying.is_empty());
            assert_eq!(got.evaluated, 27);
        }
    }

    #[test]
    fn zero_target_picks_loosest() {
        let (t, paths, labels, preds) = grid_fixture(3);
        let got = grid_search(&t, &paths, &labels, &preds, &small_grid(), 0.0).unwrap();
        assert_eq!(got.retained_count, 80);
        assert_eq!(
            got.params,
            FilterParams { max_norm_distance: 3.0, min_split_count: 0, min_split_accuracy: 0.0 }
        );
    }

    #[test]
    fn all_correct_validation_keeps_everything() {
        let (t, paths, labels, _) = grid_fixture(5);
        let got = grid_search(&t, &paths, &labels, &labels, &small_grid(), 0.99).unwrap();
        assert_eq!(got.retained_count, paths.len());
        assert_eq!(got.retained_accuracy, 1.0);
        assert!(got.met_target);
    }

    #[test]
    fn grid_search_rejects_empty_validation() {
        let t = SplitTable::default();
        assert!(matches!(
            grid_search(&t, &[], &[], &[], &small_grid(), 0.9),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn path_model_has_one_cluster_set_per_layer() {
        let net = Network::init(NetworkConfig::new(vec![3, 4, 2]), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = Dataset::from_rows(
            (0..60).map(|_| (0..3).map(|_| rng.gen()).collect()).collect(),
            (0..60).map(|i| i % 2).collect(),
        )
        .unwrap();
        let pm = build_path_model(&net, &ds, &KPolicy::default()).unwrap();
        assert_eq!(pm.layer_count(), 3);

        // paths from per-point traces agree with the batched sweep
        let acts = net.layer_outputs(ds.inputs()).unwrap();
        let batched = compute_paths(&pm, &acts).unwrap();
        for i in 0..ds.len() {
            let (_, trace) = net
                .forward::<ChaCha8Rng>(ds.point(i).as_slice().unwrap(), true, None)
                .unwrap();
            assert_eq!(compute_path(&pm, &trace.unwrap()).unwrap(), batched[i]);
        }
        // layer-l ids match a direct assign() sweep
        for (l, layer) in pm.layers.iter().enumerate() {
            for (i, p) in batched.iter().enumerate() {
                let a = layer.clusters.assign(acts[l].row(i).as_slice().unwrap()).unwrap();
                assert_eq!(p.cluster_ids[l], a.cluster);
            }
        }
    }

    #[test]
    fn identical_points_give_k1_everywhere() {
        let net = Network::init(NetworkConfig::new(vec![2, 3, 2]), 1).unwrap();
        let ds = Dataset::from_rows(vec![vec![0.2, 0.7]; 40], vec![0; 40]).unwrap();
        let pm = build_path_model(&net, &ds, &KPolicy::default()).unwrap();
        assert_eq!(pm.ks(), vec![1, 1, 1]);
        let acts = net.layer_outputs(ds.inputs()).unwrap();
        let paths = compute_paths(&pm, &acts).unwrap();
        assert!(paths.iter().all(|p| p.normalized_distances.iter().all(|&d| d == 0.0)));
        assert_eq!(paths[0], paths[1]);
    }

    #[test]
    fn overrides_bypass_the_elbow() {
        let net = Network::init(NetworkConfig::new(vec![2, 3, 2]), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = Dataset::from_rows(
            (0..50).map(|_| vec![rng.gen(), rng.gen()]).collect(),
            vec![0; 50],
        )
        .unwrap();
        let policy = KPolicy {
            overrides: [(0, 4), (2, 2)].into_iter().collect(),
            ..KPolicy::default()
        };
        let pm = build_path_model(&net, &ds, &policy).unwrap();
        assert_eq!(pm.ks()[0], 4);
        assert_eq!(pm.ks()[2], 2);
        assert!(pm.layers[0].elbow.is_none());
        assert!(pm.layers[1].elbow.is_some());
    }

    #[test]
    fn filter_params_inf_round_trip() {
        let p = FilterParams::vacuous();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<FilterParams>(&s).unwrap(), p);
    }

    #[test]
    fn grid_inf_round_trip() {
        let g = FilterGrid {
            max_norm_distance: vec![1.5, f64::INFINITY],
            ..FilterGrid::default()
        };
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<FilterGrid>(&s).unwrap(), g);
        let t: FilterGrid = toml::from_str(
            "max_norm_distance = [1.0, inf]\nmin_split_count = [1]\nmin_split_accuracy = [0.5]",
        )
        .unwrap();
        assert_eq!(t.max_norm_distance[1], f64::INFINITY);
    }
}
