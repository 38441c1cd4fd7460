//! End-to-end run: load, train the ensemble, classify the test set, check the
//! bounds, render features, route external predictions, write the report.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::{
    epsilon_interval, monte_carlo_coverage, verify_ensemble_bound, BoundCheck, BoundReport, CoverageConfig,
    TheoremInputs, ValidationRun,
};
use crate::config::{DataConfig, ExternalSection, RunConfig};
use crate::data::Dataset;
use crate::ensemble::{
    large_model_route, make_partitions, tier_report, train_ensemble, EnsembleBundle, ExternalPredictions,
    MemberSeeds, ModelTag, TierReport, TierVerdict,
};
use crate::error::{Error, Result};
use crate::features::{default_shape, extract_features, SplitFeatures};
use crate::io::{emit_image, load_csv, load_idx, write_json};
use crate::path_analysis::{FilterParams, Split};
use crate::synthetic::blobs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Load,
    Train,
    Test,
    Bounds,
    Features,
    Route,
    Write,
}

impl Stage {
    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        10 + self as i32
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = serde_json::to_value(self).expect("unit variant");
        write!(f, "{}", name.as_str().expect("string"))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait InStage<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> InStage<T> for Result<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::ErrorKind::NotFound.into()))
    }
}

/// Training and test sets as configured.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let limit = |ds: Dataset, n: Option<usize>| match n {
        Some(n) => ds.take(n),
        None => ds,
    };
    let (train, test) = match &cfg.data {
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            for p in [train_images, train_labels, test_images, test_labels] {
                require(p)?;
            }
            (
                limit(load_idx(train_images, train_labels)?, *train_limit),
                limit(load_idx(test_images, test_labels)?, *test_limit),
            )
        }
        DataConfig::Csv {
            train,
            test,
            train_limit,
            test_limit,
        } => {
            require(train)?;
            require(test)?;
            (limit(load_csv(train)?, *train_limit), limit(load_csv(test)?, *test_limit))
        }
        DataConfig::Synthetic { .. } => {
            let (blob, n_train) = cfg.blob_config().expect("synthetic data");
            let all = blobs(&blob)?;
            let test_idx: Vec<usize> = (n_train..all.len()).collect();
            (all.take(n_train), all.subset(&test_idx)?)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            got: test.dim(),
        });
    }
    Ok((train, test))
}

pub fn classes(train: &Dataset, test: &Dataset) -> usize {
    train.num_classes().max(test.num_classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub ks: Vec<usize>,
    pub params: FilterParams,
    pub retained_validation: usize,
    pub retained_accuracy: f64,
    pub met_target: bool,
    pub best_epoch: usize,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub fold: usize,
    pub seeds: MemberSeeds,
    pub flagged: bool,
    pub bad_train_points: usize,
    pub model1: ModelSummary,
    pub model2: ModelSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOutcome {
    pub verdicts: Vec<TierVerdict>,
    pub report: TierReport,
    pub members: Vec<MemberSummary>,
}

fn accuracy(preds: &[usize], truth: &[usize]) -> f64 {
    preds.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

pub fn test_stage(bundle: &EnsembleBundle, test: &Dataset) -> Result<TestOutcome> {
    let assessed = bundle.assess(test.inputs())?;
    let verdicts = assessed.verdicts(bundle.config.vote_rule);
    let labels: Vec<usize> = verdicts.iter().map(|v| v.label).collect();
    let report = tier_report(&verdicts, &labels, test.labels())?;
    let summary = |s: &crate::ensemble::SubModel, a: &crate::ensemble::Assessment| ModelSummary {
        ks: s.path_model.ks(),
        params: s.grid.params,
        retained_validation: s.grid.retained_count,
        retained_accuracy: s.grid.retained_accuracy,
        met_target: s.grid.met_target,
        best_epoch: s.best_epoch,
        validation_accuracy: s.val_accuracy,
        test_accuracy: accuracy(&a.predictions(), test.labels()),
    };
    let members = bundle
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| MemberSummary {
            fold: m.fold,
            seeds: m.seeds,
            flagged: m.flagged,
            bad_train_points: m.bad_train_indices.len(),
            model1: summary(&m.model1, &assessed.model1[i]),
            model2: summary(&m.model2, &assessed.model2[i]),
        })
        .collect();
    Ok(TestOutcome {
        verdicts,
        report,
        members,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    /// Measured on the pooled training data with the model 1's.
    pub validation_run: ValidationRun,
    pub check: BoundCheck,
    pub theorem_inputs: TheoremInputs,
    pub theorem: BoundReport,
    pub coverage: Option<f64>,
}

/// `k` is the member count, `n` the smallest validation fold and `ε′` the
/// largest model-1 validation error.
pub fn bounds_stage(bundle: &EnsembleBundle, train: &Dataset, cfg: &RunConfig) -> Result<BoundsSummary> {
    let validation_run = bundle.validation_run(train)?;
    let check = verify_ensemble_bound(&validation_run)?;
    let folds = make_partitions(train.len(), bundle.config.scheme)?;
    let n = folds.iter().map(|f| f.validation.len()).min().expect("two or more folds");
    let eps_prime = bundle
        .members
        .iter()
        .map(|m| 1.0 - m.model1.val_accuracy)
        .fold(0.0, f64::max);
    let theorem_inputs = TheoremInputs {
        k: bundle.members.len() as f64,
        n: n as f64,
        eps_prime,
        z: cfg.bounds.z,
    };
    let theorem = epsilon_interval(&theorem_inputs)?;
    let coverage = if cfg.bounds.coverage_trials > 0 {
        Some(monte_carlo_coverage(&CoverageConfig {
            true_eps: eps_prime,
            n,
            k: bundle.members.len(),
            z: cfg.bounds.z,
            trials: cfg.bounds.coverage_trials,
            seed: cfg.bounds.seed,
        })?)
    } else {
        None
    };
    Ok(BoundsSummary {
        validation_run,
        check,
        theorem_inputs,
        theorem,
        coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub split: Split,
    pub average: PathBuf,
    pub synthesized: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub member: usize,
    pub good_splits: usize,
    pub records: Vec<FeatureRecord>,
}

/// Renders every good split of one member's model 1 under `dir`.
pub fn features_stage(
    bundle: &EnsembleBundle,
    train: &Dataset,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(FeatureSummary, Vec<SplitFeatures>)> {
    let f = &cfg.features;
    let member = bundle
        .members
        .get(f.member)
        .ok_or_else(|| Error::InvalidConfig(format!("features.member {} out of range", f.member)))?;
    let shape = match (f.height, f.width) {
        (Some(h), Some(w)) => (h, w),
        _ => default_shape(train.dim()),
    };
    let fold = &make_partitions(train.len(), bundle.config.scheme)?[member.fold];
    let fold_train = train.subset(&fold.train)?;
    let model = &member.model1;
    let (paths, _) = model.paths(fold_train.inputs())?;
    let features = extract_features(
        &model.network,
        &model.path_model,
        &model.split_table,
        model.params(),
        &fold_train,
        &paths,
        &f.synthesis(),
        shape,
    )?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = f.image_format.extension();
    let mut records = Vec::with_capacity(features.len());
    for sf in &features {
        let stem = format!("split_{}_{}_{}", sf.split.layer, sf.split.src, sf.split.dst);
        let average = dir.join(format!("{stem}_average.{ext}"));
        let synthesized = dir.join(format!("{stem}_backprop.{ext}"));
        emit_image(&sf.average, &average, f.image_format)?;
        emit_image(&sf.synthesized, &synthesized, f.image_format)?;
        records.push(FeatureRecord {
            split: sf.split,
            average: average.file_name().expect("file").into(),
            synthesized: synthesized.file_name().expect("file").into(),
            initial_loss: sf.initial_loss,
            final_loss: sf.final_loss,
        });
    }
    Ok((
        FeatureSummary {
            member: f.member,
            good_splits: features.len(),
            records,
        },
        features,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub labels: Vec<usize>,
    pub report: TierReport,
}

pub fn route_stage(verdicts: &[TierVerdict], ext: &ExternalSection, truth: &[usize]) -> Result<RoutingSummary> {
    let original = ExternalPredictions::load_csv(&ext.original, ModelTag::Original)?;
    let bad = ExternalPredictions::load_csv(&ext.bad, ModelTag::Bad)?;
    let labels = large_model_route(verdicts, &original, &bad)?;
    let report = tier_report(verdicts, &labels, truth)?;
    Ok(RoutingSummary { labels, report })
}

/// Everything about a run except timing; a pure function of the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub train_points: usize,
    pub test_points: usize,
    pub classes: usize,
    pub members: Vec<MemberSummary>,
    pub small_model: TierReport,
    pub ensemble_test_accuracy: f64,
    /// Best test accuracy over all individual networks.
    pub best_network_test_accuracy: f64,
    pub bounds: BoundsSummary,
    pub features: Option<FeatureSummary>,
    pub large_model: Option<TierReport>,
}

impl RunReport {
    /// Human-readable tables.
    pub fn render(&self) -> String {
        let mut out = self.small_model.render("Small Model");
        if let Some(large) = &self.large_model {
            out.push('\n');
            out.push_str(&large.render("Large Model"));
        }
        let b = &self.bounds.check;
        out.push_str(&format!(
            "\nEnsemble accuracy {:.2}%, best single network {:.2}%\n\
             Voted validation errors {} <= bound {:.2} (v = {}, f1 = {:.4}, f2 = {:.4}): {}\n",
            100.0 * self.ensemble_test_accuracy,
            100.0 * self.best_network_test_accuracy,
            b.observed_incorrect,
            b.bound,
            b.v,
            b.f1,
            b.f2,
            if b.passed { "holds" } else { "VIOLATED" },
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<PathBuf>,
    pub timings_ms: BTreeMap<String, u128>,
    pub small_model: TierReport,
    pub large_model: Option<TierReport>,
}

/// Refuses a non-empty directory unless `overwrite` is set.
pub fn prepare_output(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied && !overwrite {
            return Err(Error::InvalidConfig(format!(
                "output directory {} is not empty; set output.overwrite to reuse it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_verdicts(path: &Path, verdicts: &[TierVerdict], truth: &[usize]) -> Result<()> {
    let mut out = String::from("index,tier,label,truth\n");
    for (i, (v, y)) in verdicts.iter().zip(truth).enumerate() {
        let tier = serde_json::to_value(v.tier)?;
        out.push_str(&format!("{i},{},{},{y}\n", tier.as_str().expect("string"), v.label));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<(RunManifest, RunReport), PipelineError> {
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, u128>| {
        timings.insert(name.to_string(), clock.elapsed().as_millis());
        clock = Instant::now();
    };

    cfg.validate().stage(Stage::Config)?;
    let config_hash = cfg.hash().stage(Stage::Config)?;
    let (train, test) = load_data(cfg).stage(Stage::Load)?;
    let classes = classes(&train, &test);
    let ens_cfg = cfg.ensemble_config(train.dim(), classes).stage(Stage::Config)?;
    let out = &cfg.output.dir;
    prepare_output(out, cfg.output.overwrite).stage(Stage::Config)?;
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml().stage(Stage::Write)?)
        .map_err(|e| Error::io(&config_path, e))
        .stage(Stage::Write)?;
    artifacts.push("config.toml".into());
    lap("load", &mut timings);

    log::info!("training {} members on {} points", ens_cfg.scheme.fold_count(), train.len());
    let bundle = train_ensemble(&train, &ens_cfg).stage(Stage::Train)?;
    for p in bundle.save(&out.join("bundle")).stage(Stage::Write)? {
        artifacts.push(p.strip_prefix(out).expect("inside run dir").to_path_buf());
    }
    lap("train", &mut timings);

    let tested = test_stage(&bundle, &test).stage(Stage::Test)?;
    write_verdicts(&out.join("test_verdicts.csv"), &tested.verdicts, test.labels()).stage(Stage::Write)?;
    artifacts.push("test_verdicts.csv".into());
    lap("test", &mut timings);

    let bounds = bounds_stage(&bundle, &train, cfg).stage(Stage::Bounds)?;
    if !bounds.check.passed {
        log::error!("validation bound violated: {:?}", bounds.check);
    }
    lap("bounds", &mut timings);

    let features = if cfg.features.enabled {
        let (summary, _) = features_stage(&bundle, &train, cfg, &out.join("features")).stage(Stage::Features)?;
        for r in &summary.records {
            artifacts.push(Path::new("features").join(&r.average));
            artifacts.push(Path::new("features").join(&r.synthesized));
        }
        Some(summary)
    } else {
        None
    };
    lap("features", &mut timings);

    let large_model = match &cfg.external {
        Some(ext) => {
            let routed = route_stage(&tested.verdicts, ext, test.labels()).stage(Stage::Route)?;
            let path = out.join("routed_labels.csv");
            let body: String = std::iter::once("index,label\n".to_string())
                .chain(routed.labels.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
                .collect();
            fs::write(&path, body).map_err(|e| Error::io(&path, e)).stage(Stage::Write)?;
            artifacts.push("routed_labels.csv".into());
            Some(routed.report)
        }
        None => None,
    };
    lap("route", &mut timings);

    let best_network_test_accuracy = tested
        .members
        .iter()
        .flat_map(|m| [m.model1.test_accuracy, m.model2.test_accuracy])
        .fold(0.0, f64::max);
    let report = RunReport {
        config_hash: config_hash.clone(),
        train_points: train.len(),
        test_points: test.len(),
        classes,
        members: tested.members,
        ensemble_test_accuracy: tested.report.overall.accuracy().unwrap_or(0.0),
        small_model: tested.report,
        best_network_test_accuracy,
        bounds,
        features,
        large_model,
    };
    write_json(&out.join("report.json"), &report).stage(Stage::Write)?;
    let txt = out.join("report.txt");
    fs::write(&txt, report.render()).map_err(|e| Error::io(&txt, e)).stage(Stage::Write)?;
    artifacts.push("report.json".into());
    artifacts.push("report.txt".into());
    artifacts.push("manifest.json".into());
    lap("report", &mut timings);

    let mut seeds = BTreeMap::from([
        ("ensemble".to_string(), cfg.ensemble.seed),
        ("bounds".to_string(), cfg.bounds.seed),
    ]);
    if let DataConfig::Synthetic { seed, .. } = cfg.data {
        seeds.insert("data".into(), seed);
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash,
        seeds,
        artifacts,
        timings_ms: timings,
        small_model: report.small_model.clone(),
        large_model: report.large_model.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest).stage(Stage::Write)?;
    Ok((manifest, report))
}
