use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cluster_paths::bounds::{discovery_probability_lb, epsilon_interval, monte_carlo_coverage, CoverageConfig, TheoremInputs};
use cluster_paths::config::RunConfig;
use cluster_paths::ensemble::{make_partitions, train_ensemble, EnsembleBundle, MemberSeeds};
use cluster_paths::io::{read_json, write_csv, write_json};
use cluster_paths::nn::{train, Network};
use cluster_paths::path_analysis::{build_path_model, compute_paths, grid_search, split_stats};
use cluster_paths::pipeline::{
    self, features_stage, load_data, prepare_output, run_pipeline, test_stage, PipelineError, RunReport, Stage,
};
use cluster_paths::{Dataset, Error};

#[derive(Parser)]
#[command(name = "cluster-paths", version, about = "Cluster-path analysis and tiered ensembles for feed-forward networks")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set training.epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut overrides = self.overrides.clone();
        if self.overwrite {
            overrides.push("output.overwrite=true".into());
        }
        RunConfig::load(&self.config, &overrides).map_err(at(Stage::Config))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load the configured datasets, print a summary, optionally export CSV.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Train a single network on one fold.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Network JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit cluster paths for a trained network and search the filter grid.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        network: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ensemble into `<output.dir>/bundle`.
    EnsembleTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Classify the test set with a trained bundle.
    EnsembleTest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<output.dir>/bundle`.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Render feature images for one member's good splits.
    Features {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        member: Option<usize>,
    },
    /// Evaluate the interval and discovery bounds.
    Bounds {
        #[arg(long)]
        k: f64,
        #[arg(long)]
        n: f64,
        #[arg(long, default_value_t = 0.0)]
        eps_prime: f64,
        #[arg(long, default_value_t = 2.0)]
        z: f64,
        /// Also estimate interval coverage at this true error rate.
        #[arg(long)]
        true_eps: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the tables of a finished run.
    Report {
        run: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run every stage end to end.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn at(stage: Stage) -> impl Fn(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| at(Stage::Write)(e.into()))?;
    println!("{text}");
    Ok(())
}

fn fold_sets(cfg: &RunConfig, train_set: &Dataset, fold: usize) -> Result<(Dataset, Dataset), Error> {
    let folds = make_partitions(train_set.len(), cfg.partition)?;
    let f = folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} of {}", folds.len())))?;
    Ok((train_set.subset(&f.train)?, train_set.subset(&f.validation)?))
}

fn bundle_dir(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.output.dir.join("bundle"))
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Ingest { cfg, export } => {
            let cfg = cfg.load()?;
            let (train_set, test_set) = load_data(&cfg).map_err(at(Stage::Load))?;
            if let Some(dir) = export {
                fs::create_dir_all(&dir).map_err(|e| at(Stage::Write)(Error::Io { path: dir.clone(), source: e }))?;
                write_csv(&train_set, &dir.join("train.csv")).map_err(at(Stage::Write))?;
                write_csv(&test_set, &dir.join("test.csv")).map_err(at(Stage::Write))?;
            }
            print_json(&serde_json::json!({
                "train_points": train_set.len(),
                "test_points": test_set.len(),
                "dim": train_set.dim(),
                "classes": pipeline::classes(&train_set, &test_set),
            }))
        }
        Command::Train { cfg, fold, out } => {
            let cfg = cfg.load()?;
            let (train_set, test_set) = load_data(&cfg).map_err(at(Stage::Load))?;
            let ens = cfg
                .ensemble_config(train_set.dim(), pipeline::classes(&train_set, &test_set))
                .map_err(at(Stage::Config))?;
            let (fit, val) = fold_sets(&cfg, &train_set, fold).map_err(at(Stage::Config))?;
            let seeds = MemberSeeds::derive(ens.seed, fold);
            let net = Network::init(ens.network.clone(), seeds.init1).map_err(at(Stage::Train))?;
            let tc = cluster_paths::nn::TrainConfig {
                seed: seeds.train1,
                ..ens.train
            };
            let outcome = train(net, &fit, &val, &tc).map_err(at(Stage::Train))?;
            write_json(&out, &outcome.network).map_err(at(Stage::Write))?;
            print_json(&serde_json::json!({
                "best_epoch": outcome.best_epoch,
                "validation_accuracy": outcome.best_val_accuracy,
                "test_accuracy": outcome.network.accuracy(&test_set).map_err(at(Stage::Test))?,
            }))
        }
        Command::Analyze { cfg, network, fold, out } => {
            let cfg = cfg.load()?;
            let (train_set, _) = load_data(&cfg).map_err(at(Stage::Load))?;
            let net: Network = read_json(&network).map_err(at(Stage::Load))?;
            let (fit, val) = fold_sets(&cfg, &train_set, fold).map_err(at(Stage::Config))?;
            let analysis = (|| {
                let mut policy = cfg.clustering.k_policy()?;
                policy.seed = MemberSeeds::derive(cfg.ensemble.seed, fold).clustering;
                let pm = build_path_model(&net, &fit, &policy)?;
                let train_paths = compute_paths(&pm, &net.layer_outputs(fit.inputs())?)?;
                let table = split_stats(&train_paths, fit.labels(), &net.predict(fit.inputs())?)?;
                let val_paths = compute_paths(&pm, &net.layer_outputs(val.inputs())?)?;
                let grid = grid_search(
                    &table,
                    &val_paths,
                    val.labels(),
                    &net.predict(val.inputs())?,
                    &cfg.filter.grid(),
                    cfg.filter.target_accuracy,
                )?;
                Ok::<_, Error>(serde_json::json!({ "path_model": pm, "split_table": table, "grid": grid }))
            })()
            .map_err(at(Stage::Train))?;
            write_json(&out, &analysis).map_err(at(Stage::Write))?;
            print_json(&analysis["grid"])
        }
        Command::EnsembleTrain { cfg } => {
            let cfg = cfg.load()?;
            let (train_set, test_set) = load_data(&cfg).map_err(at(Stage::Load))?;
            let ens = cfg
                .ensemble_config(train_set.dim(), pipeline::classes(&train_set, &test_set))
                .map_err(at(Stage::Config))?;
            prepare_output(&cfg.output.dir, cfg.output.overwrite).map_err(at(Stage::Config))?;
            let bundle = train_ensemble(&train_set, &ens).map_err(at(Stage::Train))?;
            bundle.save(&bundle_dir(&cfg, None)).map_err(at(Stage::Write))?;
            let bad: BTreeSet<usize> = bundle
                .members
                .iter()
                .flat_map(|m| m.bad_train_indices.iter().copied())
                .collect();
            print_json(&serde_json::json!({
                "members": bundle.members.len(),
                "flagged": bundle.members.iter().filter(|m| m.flagged).count(),
                "bad_train_points": bad.len(),
            }))
        }
        Command::EnsembleTest { cfg, bundle } => {
            let cfg = cfg.load()?;
            let (_, test_set) = load_data(&cfg).map_err(at(Stage::Load))?;
            let bundle = EnsembleBundle::load(&bundle_dir(&cfg, bundle)).map_err(at(Stage::Load))?;
            let tested = test_stage(&bundle, &test_set).map_err(at(Stage::Test))?;
            fs::create_dir_all(&cfg.output.dir)
                .map_err(|e| at(Stage::Write)(Error::Io { path: cfg.output.dir.clone(), source: e }))?;
            write_json(&cfg.output.dir.join("tier_report.json"), &tested.report).map_err(at(Stage::Write))?;
            print!("{}", tested.report.render("Small Model"));
            Ok(())
        }
        Command::Features { cfg, bundle, member } => {
            let mut cfg = cfg.load()?;
            if let Some(m) = member {
                cfg.features.member = m;
            }
            let (train_set, _) = load_data(&cfg).map_err(at(Stage::Load))?;
            let bundle = EnsembleBundle::load(&bundle_dir(&cfg, bundle)).map_err(at(Stage::Load))?;
            let dir = cfg.output.dir.join("features");
            let (summary, _) = features_stage(&bundle, &train_set, &cfg, &dir).map_err(at(Stage::Features))?;
            write_json(&dir.join("index.json"), &summary).map_err(at(Stage::Write))?;
            println!("{} good splits rendered into {}", summary.good_splits, dir.display());
            Ok(())
        }
        Command::Bounds {
            k,
            n,
            eps_prime,
            z,
            true_eps,
            trials,
            seed,
        } => {
            let report = epsilon_interval(&TheoremInputs { k, n, eps_prime, z }).map_err(at(Stage::Bounds))?;
            let coverage = match true_eps {
                Some(eps) => Some(
                    monte_carlo_coverage(&CoverageConfig {
                        true_eps: eps,
                        n: n as usize,
                        k: k as usize,
                        z,
                        trials,
                        seed,
                    })
                    .map_err(at(Stage::Bounds))?,
                ),
                None => None,
            };
            print_json(&serde_json::json!({
                "discovery_probability_lb": discovery_probability_lb(k).map_err(at(Stage::Bounds))?,
                "interval": report,
                "coverage": coverage,
            }))
        }
        Command::Report { run, json } => {
            let report: RunReport = read_json(&run.join("report.json")).map_err(at(Stage::Load))?;
            if json {
                print_json(&report)
            } else {
                print!("{}", report.render());
                Ok(())
            }
        }
        Command::Pipeline { cfg } => {
            let cfg = cfg.load()?;
            let (manifest, report) = run_pipeline(&cfg)?;
            print!("{}", report.render());
            println!("\n{} artifacts in {}", manifest.artifacts.len(), Path::new(&cfg.output.dir).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e.source);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
