//! Run configuration: a TOML file with one section per stage. Any key can be
//! overridden with `section.key=value`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{EnsembleConfig, PartitionScheme, SplitBasis, VoteRule};
use crate::error::{Error, Result};
use crate::features::SynthesisConfig;
use crate::io::ImageFormat;
use crate::nn::{Activation, AdamConfig, NetworkConfig, TrainConfig};
use crate::path_analysis::{FilterGrid, KPolicy};
use crate::synthetic::BlobConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `n` points of each file.
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    /// Gaussian blobs; training and test points share the class centers.
    Synthetic {
        train_points: usize,
        test_points: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            hidden: vec![100, 100, 100, 100],
            activation: Activation::Sigmoid,
            input_dropout: 0.1,
            hidden_dropout: 0.2,
        }
    }
}

impl NetworkSection {
    /// Input and output sizes come from the data.
    pub fn network_config(&self, input_dim: usize, classes: usize) -> NetworkConfig {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        let mut rates = vec![self.input_dropout];
        rates.extend(std::iter::repeat_n(self.hidden_dropout, self.hidden.len()));
        let cfg = NetworkConfig::new(sizes).with_activation(self.activation);
        if rates.iter().all(|&r| r == 0.0) {
            cfg
        } else {
            cfg.with_dropout(rates)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            step_size: t.adam.step_size,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                step_size: self.step_size,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    /// Elbow candidates; empty means `1..=min(20, n/10)`.
    pub candidates: Vec<usize>,
    pub elbow_restarts: usize,
    pub restarts: usize,
    /// Fixed k per layer index: `{ "0" = 8 }`.
    pub overrides: BTreeMap<String, usize>,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let k = KPolicy::default();
        ClusteringSection {
            candidates: Vec::new(),
            elbow_restarts: k.elbow_restarts,
            restarts: k.restarts,
            overrides: BTreeMap::new(),
        }
    }
}

impl ClusteringSection {
    pub fn k_policy(&self) -> Result<KPolicy> {
        let overrides = self
            .overrides
            .iter()
            .map(|(layer, &k)| {
                layer
                    .parse::<usize>()
                    .map(|l| (l, k))
                    .map_err(|_| Error::InvalidConfig(format!("clustering override key {layer:?} is not a layer index")))
            })
            .collect::<Result<_>>()?;
        Ok(KPolicy {
            candidates: (!self.candidates.is_empty()).then(|| self.candidates.clone()),
            elbow_restarts: self.elbow_restarts,
            restarts: self.restarts,
            seed: 0,
            overrides,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// May contain `inf`.
    #[serde(with = "crate::path_analysis::float_or_inf::vec")]
    pub max_norm_distance: Vec<f64>,
    pub min_split_count: Vec<usize>,
    pub min_split_accuracy: Vec<f64>,
    pub target_accuracy: f64,
    pub split_basis: SplitBasis,
}

impl FilterSection {
    pub fn grid(&self) -> FilterGrid {
        FilterGrid {
            max_norm_distance: self.max_norm_distance.clone(),
            min_split_count: self.min_split_count.clone(),
            min_split_accuracy: self.min_split_accuracy.clone(),
        }
    }
}

impl Default for FilterSection {
    fn default() -> Self {
        let grid = FilterGrid::default();
        FilterSection {
            max_norm_distance: grid.max_norm_distance,
            min_split_count: grid.min_split_count,
            min_split_accuracy: grid.min_split_accuracy,
            target_accuracy: 0.99,
            split_basis: SplitBasis::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub vote_rule: VoteRule,
    pub oversample_copies: usize,
    pub seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            vote_rule: VoteRule::Plurality,
            oversample_copies: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub enabled: bool,
    /// Which member's model 1 to render.
    pub member: usize,
    pub steps: usize,
    pub step_size: f64,
    pub image_format: ImageFormat,
    /// Defaults to a square when the input dimension is a perfect square.
    pub height: Option<usize>,
    pub width: Option<usize>,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        let s = SynthesisConfig::default();
        FeaturesSection {
            enabled: false,
            member: 0,
            steps: s.steps,
            step_size: s.adam.step_size,
            image_format: ImageFormat::Pgm,
            height: None,
            width: None,
        }
    }
}

impl FeaturesSection {
    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            steps: self.steps,
            adam: AdamConfig {
                step_size: self.step_size,
                ..AdamConfig::default()
            },
        }
    }
}

/// Score files of a larger model trained normally (`original`) and on the
/// oversampled bad points (`bad`), aligned with the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSection {
    pub original: PathBuf,
    pub bad: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub z: f64,
    /// Monte-Carlo trials for the interval coverage check; 0 skips it.
    pub coverage_trials: usize,
    pub seed: u64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            z: 2.0,
            coverage_trials: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default)]
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub partition: PartitionScheme,
    #[serde(default)]
    pub clustering: ClusteringSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub features: FeaturesSection,
    pub external: Option<ExternalSection>,
    #[serde(default)]
    pub bounds: BoundsSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.hidden.is_empty() {
            return Err(Error::InvalidConfig("network.hidden needs at least one layer".into()));
        }
        self.training.train_config(0).validate()?;
        self.clustering.k_policy()?;
        if self.bounds.z <= 0.0 {
            return Err(Error::InvalidConfig("bounds.z must be positive".into()));
        }
        if let DataConfig::Synthetic { spread, .. } = self.data {
            if !(spread > 0.0) {
                return Err(Error::InvalidConfig("data.spread must be positive".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(canonical)))
    }

    /// One blob draw holding both sets; the first `train_points` are training.
    pub fn blob_config(&self) -> Option<(BlobConfig, usize)> {
        match self.data {
            DataConfig::Synthetic {
                train_points,
                test_points,
                classes,
                dim,
                spread,
                seed,
            } => Some((
                BlobConfig {
                    points: train_points + test_points,
                    classes,
                    dim,
                    spread,
                    seed,
                },
                train_points,
            )),
            _ => None,
        }
    }

    pub fn ensemble_config(&self, input_dim: usize, classes: usize) -> Result<EnsembleConfig> {
        Ok(EnsembleConfig {
            scheme: self.partition,
            network: self.network.network_config(input_dim, classes),
            train: self.training.train_config(0),
            k_policy: self.clustering.k_policy()?,
            grid: self.filter.grid(),
            target_accuracy: self.filter.target_accuracy,
            split_basis: self.filter.split_basis,
            oversample_copies: self.ensemble.oversample_copies,
            vote_rule: self.ensemble.vote_rule,
            seed: self.ensemble.seed,
        })
    }
}

/// `section.key=value`; the value is parsed as a TOML value, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {key:?}: {p:?} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[data]
format = "synthetic"
train_points = 200
test_points = 60
classes = 3
dim = 4
spread = 0.1
seed = 1

[partition]
kind = "block"
folds = 2

[clustering]
candidates = [1, 2, 3, 4]
overrides = { "0" = 3 }

[filter]
max_norm_distance = [1.0, inf]
min_split_count = [1, 5]
min_split_accuracy = [0.9]

[output]
dir = "runs/smoke"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::parse(SAMPLE, &[]).unwrap();
        assert_eq!(cfg.partition, PartitionScheme::Block { folds: 2 });
        assert_eq!(cfg.filter.target_accuracy, 0.99);
        assert_eq!(cfg.filter.max_norm_distance, vec![1.0, f64::INFINITY]);
        assert_eq!(cfg.clustering.k_policy().unwrap().overrides[&0], 3);
        let net = cfg.network.network_config(4, 3);
        assert_eq!(net.layer_sizes, vec![4, 100, 100, 100, 100, 3]);
        assert_eq!(net.dropout_rates, vec![0.1, 0.2, 0.2, 0.2, 0.2]);
    }

    #[test]
    fn overrides_win() {
        let cfg = RunConfig::parse(
            SAMPLE,
            &[
                "training.epochs=3".into(),
                "partition.folds=4".into(),
                "output.dir=elsewhere".into(),
                "network.hidden=[8, 8]".into(),
                "features.enabled=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.partition, PartitionScheme::Block { folds: 4 });
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.network.hidden, vec![8, 8]);
        assert!(cfg.features.enabled);
        assert!(RunConfig::parse(SAMPLE, &["training.epochs".into()]).is_err());
        assert!(RunConfig::parse(SAMPLE, &["training.bogus=1".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content_and_round_trips() {
        let a = RunConfig::parse(SAMPLE, &[]).unwrap();
        let b = RunConfig::parse(SAMPLE, &["training.epochs=21".into()]).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
        let again = RunConfig::parse(&a.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, a);
    }
}
