//! Data preparation, training and run-directory bookkeeping.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use jlu::checkpoint::save_bundle;
use jlu::datagen::{import_dataset, sample_dataset, LabeledDataset, Split, TaskDataset};
use jlu::eval::{metrics_csv, percent_unlearned, project_embeddings, write_embeddings, MetricsRecord};
use jlu::model::NetworkBundle;
use jlu::trainer::{run_baseline, run_jlu};
use serde_json::{json, Value};

use crate::config::{DataSource, Network, RunConfig, SecondarySource, SyntheticData};
use crate::error::CliError;

pub const INCOMPLETE: &str = ".incomplete";
pub const LOCK: &str = ".lock";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.jlub";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

pub struct PreparedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub secondary: Vec<TaskDataset>,
}

/// Seeds for the train, test and separate secondary samples.
pub fn split_seeds(seed: u64) -> [u64; 3] {
    let base = seed.wrapping_mul(4);
    [base, base.wrapping_add(1), base.wrapping_add(2)]
}

pub fn synthetic_splits(
    s: &SyntheticData,
) -> Result<(LabeledDataset, LabeledDataset, Option<LabeledDataset>), CliError> {
    let [train_seed, test_seed, sec_seed] = split_seeds(s.seed);
    let train = sample_dataset(&s.spec, s.n_train, Split::Train, train_seed)?;
    let test = jlu::datagen::balanced_test(&s.spec, s.n_test, test_seed)?;
    let secondary = match s.secondary_source {
        SecondarySource::Same => None,
        SecondarySource::Unbiased => Some(sample_dataset(
            &s.spec,
            s.n_secondary(),
            Split::Test,
            sec_seed,
        )?),
    };
    Ok((train, test, secondary))
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData, CliError> {
    let (train, test, secondary_src) = match &cfg.data {
        DataSource::Synthetic(s) => synthetic_splits(s)?,
        DataSource::Files(f) => {
            let train = import_dataset(&f.train)?;
            let test = import_dataset(&f.test)?;
            let sec = f.secondary.as_ref().map(import_dataset).transpose()?;
            (train, test, sec)
        }
    };
    let source = secondary_src.as_ref().unwrap_or(&train);
    let names = train.spurious_names();
    let available: Vec<&str> = names.iter().map(String::as_str).collect();
    cfg.check_secondary_names(&available)?;
    if train.input_dim() != test.input_dim() || train.input_dim() != source.input_dim() {
        return Err(CliError::Validation(format!(
            "datasets disagree on feature count (train {}, test {}, secondary {})",
            train.input_dim(),
            test.input_dim(),
            source.input_dim()
        )));
    }
    let secondary = cfg
        .secondary_names(&available)
        .iter()
        .map(|n| source.task_dataset(n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PreparedData {
        train,
        test,
        secondary,
    })
}

pub struct NetworkResult {
    pub network: Network,
    pub bundle: NetworkBundle,
    pub history: Vec<MetricsRecord>,
}

impl NetworkResult {
    pub fn last(&self) -> &MetricsRecord {
        self.history.last().expect("epochs >= 1")
    }
}

pub fn train_network(
    cfg: &RunConfig,
    data: &PreparedData,
    network: Network,
) -> Result<NetworkResult, CliError> {
    let (bundle, history) = match network {
        Network::Baseline => run_baseline(&cfg.train, &cfg.model, &data.train, &data.test)?,
        Network::Jlu => run_jlu(
            &cfg.train,
            &cfg.model,
            &data.train,
            &data.secondary,
            &data.test,
        )?,
    };
    if let Some(bad) = history.iter().find(|r| !r.is_finite()) {
        return Err(CliError::Runtime(format!(
            "{} training diverged (non-finite metrics at epoch {})",
            network.as_str(),
            bad.epoch
        )));
    }
    Ok(NetworkResult {
        network,
        bundle,
        history,
    })
}

/// Trains every network the config's mode asks for.
pub fn train_all(cfg: &RunConfig, data: &PreparedData) -> Result<Vec<NetworkResult>, CliError> {
    cfg.mode
        .networks()
        .iter()
        .map(|&n| train_network(cfg, data, n))
        .collect()
}

/// Percent unlearned per task of the blind network relative to the baseline.
pub fn unlearned(baseline: &MetricsRecord, blind: &MetricsRecord) -> Vec<(String, Option<f64>)> {
    blind
        .tasks
        .iter()
        .map(|t| {
            let pct = baseline
                .tasks
                .iter()
                .find(|b| b.name == t.name)
                .and_then(|b| percent_unlearned(b.rescaled_score, t.rescaled_score));
            (t.name.clone(), pct)
        })
        .collect()
}

pub fn record_json(r: &MetricsRecord) -> Value {
    json!({
        "epoch": r.epoch,
        "primary_accuracy": r.primary_accuracy,
        "primary_adjacent_accuracy": r.primary_adjacent_accuracy,
        "loss_primary": r.loss_primary,
        "loss_confusion": r.loss_confusion,
        "tasks": r.tasks.iter().map(|t| json!({
            "name": t.name,
            "classes": t.classes,
            "chance": 1.0 / t.classes as f64,
            "probe_accuracy": t.probe_accuracy,
            "rescaled_score": t.rescaled_score,
            "percent_unlearned": t.percent_unlearned,
        })).collect::<Vec<_>>(),
        "kl": r.kl.iter().map(|k| json!({
            "task": k.task, "a": k.a, "b": k.b, "value": k.value,
        })).collect::<Vec<_>>(),
        "mean_kl": r.mean_kl(),
    })
}

pub fn summary_json(cfg: &RunConfig, results: &[NetworkResult]) -> Value {
    let mut networks = serde_json::Map::new();
    for r in results {
        let mut last = r.last().clone();
        if r.network == Network::Jlu {
            if let Some(b) = results.iter().find(|b| b.network == Network::Baseline) {
                for (t, (_, pct)) in last.tasks.iter_mut().zip(unlearned(b.last(), r.last())) {
                    t.percent_unlearned = pct;
                }
            }
        }
        networks.insert(r.network.as_str().into(), record_json(&last));
    }
    json!({
        "run": cfg.run_name(),
        "experiment": cfg.experiment.as_str(),
        "seed": cfg.train.seed,
        "config_hash": cfg.hash(),
        "networks": networks,
    })
}

pub fn summary_line(r: &NetworkResult) -> String {
    let last = r.last();
    let mut line = format!(
        "{}: epochs={} primary_acc={:.4} adj_acc={:.4}",
        r.network.as_str(),
        last.epoch,
        last.primary_accuracy,
        last.primary_adjacent_accuracy
    );
    for t in &last.tasks {
        line.push_str(&format!(
            " probe_{}={:.4} (chance {:.4})",
            t.name,
            t.probe_accuracy,
            1.0 / t.classes as f64
        ));
    }
    line.push_str(&format!(" mean_kl={:.4}", last.mean_kl()));
    line
}

pub fn embeddings_csv(bundle: &NetworkBundle, ds: &LabeledDataset) -> Result<Vec<u8>, CliError> {
    let emb = bundle.embed(&ds.x)?;
    let proj = project_embeddings(&emb)?;
    let mut buf = Vec::new();
    write_embeddings(&emb, &proj, ds, &mut buf).expect("writing to memory");
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes the per-network artifacts under `dir/<network>/`.
pub fn write_network(dir: &Path, r: &NetworkResult, test: &LabeledDataset) -> Result<(), CliError> {
    let sub = dir.join(r.network.as_str());
    fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
    write_file(&sub.join(METRICS_FILE), metrics_csv(&r.history).as_bytes())?;
    save_bundle(&r.bundle, sub.join(CHECKPOINT_FILE))?;
    write_file(&sub.join(EMBEDDINGS_FILE), &embeddings_csv(&r.bundle, test)?)?;
    Ok(())
}

/// Holds the run directory's lock file for the lifetime of the value.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(
                format!("{} is locked by another process ({})", dir.display(), path.display()),
            )),
            Err(e) => Err(CliError::io(path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).is_file() && dir.join(SUMMARY_FILE).is_file() && !dir.join(INCOMPLETE).exists()
}

fn stored_hash(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE)).ok()?;
    serde_json::from_str::<RunConfig>(&text).ok().map(|c| c.hash())
}

#[derive(Debug, PartialEq, Eq)]
pub enum TrainOutcome {
    Trained,
    AlreadyComplete,
}

/// Trains into `dir`. A completed directory with the same config is left
/// alone; an incomplete one is only overwritten with `resume`.
pub fn train_into(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<TrainOutcome, CliError> {
    let hash = cfg.hash();
    if dir.exists() {
        match stored_hash(dir) {
            Some(h) if h != hash => {
                return Err(CliError::Validation(format!(
                    "{} holds a run with config hash {}, refusing to {} with hash {}",
                    dir.display(),
                    &h[..8],
                    if resume { "resume" } else { "overwrite" },
                    &hash[..8]
                )))
            }
            Some(_) if is_complete(dir) => return Ok(TrainOutcome::AlreadyComplete),
            _ if !resume && dir.join(INCOMPLETE).exists() => {
                return Err(CliError::Validation(format!(
                    "{} holds an incomplete run; pass --resume to restart it",
                    dir.display()
                )))
            }
            _ => {}
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let _lock = Lock::acquire(dir)?;
    write_file(&dir.join(INCOMPLETE), b"")?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;

    let data = prepare_data(cfg)?;
    let results = train_all(cfg, &data)?;
    for r in &results {
        write_network(dir, r, &data.test)?;
    }
    let summary = serde_json::to_string_pretty(&summary_json(cfg, &results)).expect("json");
    write_file(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
    fs::remove_file(dir.join(INCOMPLETE)).map_err(|e| CliError::io(dir.join(INCOMPLETE), e))?;
    for r in &results {
        println!("{}", summary_line(r));
    }
    Ok(TrainOutcome::Trained)
}
