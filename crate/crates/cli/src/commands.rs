//! Command implementations, independent of argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use jlu::checkpoint::load_bundle;
use jlu::datagen::{export_dataset, import_dataset, LabeledDataset};
use jlu::eval::percent_unlearned;
use jlu::model::NetworkBundle;
use jlu::trainer::evaluate;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, RunConfig, SecondarySource};
use crate::error::CliError;
use crate::report;
use crate::run::{self, embeddings_csv, record_json, split_seeds, TrainOutcome};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const SECONDARY_FILE: &str = "secondary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the synthetic train/test (and secondary) splits plus a manifest.
pub fn gen_data(config: &Path, out: &Path, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let cfg = RunConfig::load(config)?;
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(CliError::Validation(
            "gen-data needs a synthetic data source (data.synthetic)".into(),
        ));
    };
    let mut names = vec![TRAIN_FILE, TEST_FILE];
    if s.secondary_source == SecondarySource::Unbiased {
        names.push(SECONDARY_FILE);
    }
    names.push(MANIFEST_FILE);
    let paths: Vec<PathBuf> = names.iter().map(|n| out.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Validation(format!(
                "{} already exists (use --force to overwrite)",
                p.display()
            )));
        }
    }
    let (train, test, secondary) = run::synthetic_splits(s)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    export_dataset(&train, &paths[0])?;
    export_dataset(&test, &paths[1])?;
    if let Some(sec) = &secondary {
        export_dataset(sec, &paths[2])?;
    }
    let mut files = serde_json::Map::new();
    for p in &paths[..paths.len() - 1] {
        let name = p.file_name().expect("file").to_string_lossy().into_owned();
        files.insert(name, json!(sha256_file(p)?));
    }
    let [train_seed, test_seed, sec_seed] = split_seeds(s.seed);
    let manifest = json!({
        "version": crate::config::CONFIG_VERSION,
        "experiment": cfg.experiment.as_str(),
        "spec": s.spec,
        "n_train": s.n_train,
        "n_test": s.n_test,
        "n_secondary": secondary.as_ref().map(|d| d.len()),
        "secondary_source": s.secondary_source,
        "seed": s.seed,
        "split_seeds": {"train": train_seed, "test": test_seed, "secondary": sec_seed},
        "sha256": files,
    });
    let manifest_path = paths.last().expect("manifest");
    fs::write(
        manifest_path,
        serde_json::to_string_pretty(&manifest).expect("json") + "\n",
    )
    .map_err(|e| CliError::io(manifest_path, e))?;
    Ok(paths)
}

/// Trains per the config; returns the run directory.
pub fn train(
    config: &Path,
    run_dir: Option<&Path>,
    resume: bool,
) -> Result<(PathBuf, TrainOutcome), CliError> {
    let cfg = RunConfig::load(config)?;
    if let DataSource::Files(f) = &cfg.data {
        for p in [Some(&f.train), Some(&f.test), f.secondary.as_ref()].into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::Validation(format!(
                    "data file {} does not exist",
                    p.display()
                )));
            }
        }
    }
    let dir = run_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(cfg.run_name()));
    let outcome = run::train_into(&cfg, &dir, resume)?;
    Ok((dir, outcome))
}

fn restrict_tasks(ds: &LabeledDataset, tasks: &[String]) -> Result<LabeledDataset, CliError> {
    let mut out = ds.clone();
    out.spurious = tasks
        .iter()
        .map(|t| {
            ds.spurious.iter().find(|s| &s.name == t).cloned().ok_or_else(|| {
                CliError::Validation(format!(
                    "dataset has no task '{t}' (have: {})",
                    ds.spurious_names().join(", ")
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(out)
}

fn load_pair(checkpoint: &Path, dataset: &Path) -> Result<(NetworkBundle, LabeledDataset), CliError> {
    let bundle = load_bundle(checkpoint)?;
    let ds = import_dataset(dataset)?;
    if ds.input_dim() != bundle.input_dim() {
        return Err(CliError::Validation(format!(
            "{} has {} features but the checkpoint expects {}",
            dataset.display(),
            ds.input_dim(),
            bundle.input_dim()
        )));
    }
    Ok((bundle, ds))
}

/// Evaluation report for a checkpoint on a dataset, as JSON.
pub fn eval(
    checkpoint: &Path,
    dataset: &Path,
    probe: Option<&[String]>,
    baseline: Option<&Path>,
    seed: u64,
) -> Result<Value, CliError> {
    let (bundle, ds) = load_pair(checkpoint, dataset)?;
    let ds = match probe {
        Some(tasks) => restrict_tasks(&ds, tasks)?,
        None => ds,
    };
    let mut record = evaluate(&bundle, &ds, 0, (0.0, 0.0), seed)?;
    if let Some(b) = baseline {
        let (base, _) = load_pair(b, dataset)?;
        let base_record = evaluate(&base, &ds, 0, (0.0, 0.0), seed)?;
        for (t, bt) in record.tasks.iter_mut().zip(&base_record.tasks) {
            t.percent_unlearned = percent_unlearned(bt.rescaled_score, t.rescaled_score);
        }
    }
    let mut v = record_json(&record);
    let obj = v.as_object_mut().expect("object");
    for k in ["epoch", "loss_primary", "loss_confusion"] {
        obj.remove(k);
    }
    obj.insert("checkpoint".into(), json!(checkpoint.display().to_string()));
    obj.insert("dataset".into(), json!(dataset.display().to_string()));
    obj.insert(
        "baseline".into(),
        json!(baseline.map(|b| b.display().to_string())),
    );
    obj.insert("samples".into(), json!(ds.len()));
    Ok(v)
}

pub fn export_embeddings(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<usize, CliError> {
    let (bundle, ds) = load_pair(checkpoint, dataset)?;
    let bytes = embeddings_csv(&bundle, &ds)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(out, bytes).map_err(|e| CliError::io(out, e))?;
    Ok(ds.len())
}

/// Renders the comparison table; returns (table text, csv text, skipped dirs).
pub fn report(dirs: &[PathBuf]) -> Result<(String, String, Vec<PathBuf>), CliError> {
    if dirs.is_empty() {
        return Err(CliError::Validation("report needs at least one run directory".into()));
    }
    let (rows, skipped) = report::collect(dirs)?;
    if skipped.len() == dirs.len() {
        return Err(CliError::Runtime(
            "no completed run directories among the arguments".into(),
        ));
    }
    Ok((report::to_table(&rows), report::to_csv(&rows), skipped))
}
