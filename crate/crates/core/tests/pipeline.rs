use std::fs;
use std::path::Path;

use cluster_paths::config::RunConfig;
use cluster_paths::ensemble::EnsembleBundle;
use cluster_paths::pipeline::{run_pipeline, RunManifest, Stage};

fn smoke(out: &Path, extra: &[&str]) -> RunConfig {
    let mut overrides = vec![format!("output.dir={:?}", out.display().to_string())];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml"), &overrides).unwrap()
}

#[test]
fn smoke_run_writes_everything_it_lists() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = smoke(&out, &[]);
    let (manifest, report) = run_pipeline(&cfg).unwrap();
    assert_eq!(report.members.len(), 2);
    let r = &report.small_model;
    assert_eq!(r.original_good.count + r.bad_1.count + r.bad_2.count, report.test_points);
    assert_eq!(report.test_points, 100);
    assert!(report.bounds.check.passed);
    for a in &manifest.artifacts {
        assert!(out.join(a).is_file(), "{} missing", a.display());
    }
    let on_disk: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
    assert_eq!(manifest.config_hash, cfg.hash().unwrap());
    assert_eq!(EnsembleBundle::load(&out.join("bundle")).unwrap().members.len(), 2);
    let f = report.features.unwrap();
    assert_eq!(f.records.len(), f.good_splits);
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("Small Model Test Count Breakdown"));
}

#[test]
fn identical_configs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = smoke(&out, &["output.overwrite=true"]);
    run_pipeline(&cfg).unwrap();
    let first = fs::read(out.join("report.json")).unwrap();
    run_pipeline(&cfg).unwrap();
    assert_eq!(fs::read(out.join("report.json")).unwrap(), first);
}

#[test]
fn missing_dataset_fails_in_load_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = RunConfig::parse(
        &format!(
            "[data]\nformat = \"csv\"\ntrain = \"{0}/nope.csv\"\ntest = \"{0}/nope.csv\"\n\
             [partition]\nkind = \"block\"\nfolds = 2\n[output]\ndir = {1:?}\n",
            dir.path().display(),
            out.display().to_string()
        ),
        &[],
    )
    .unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Load);
    assert!(!out.join("bundle").exists());
}

#[test]
fn refuses_non_empty_output_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let err = run_pipeline(&smoke(dir.path(), &[])).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert!(run_pipeline(&smoke(dir.path(), &["output.overwrite=true", "features.enabled=false"])).is_ok());
    assert!(dir.path().join("keep.txt").exists());
}
