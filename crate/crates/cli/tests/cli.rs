use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jlu::model::ModelConfig;
use jlu_cli::config::{DataSource, Mode, RunConfig};
use jlu_cli::presets::bias_removal;

fn jlu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jlu"))
        .args(args)
        .output()
        .expect("run jlu")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = bias_removal(3);
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.n_train = 240;
        s.n_test = 160;
        s.n_secondary = Some(240);
    }
    cfg.model = ModelConfig {
        hidden: vec![8],
        embedding_dim: 4,
        ..Default::default()
    };
    cfg.train.epochs = 2;
    cfg.output_dir = dir.join("runs");
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train(config: &Path, run_dir: &Path) -> Output {
    jlu(&["train", "--config", p(config), "--run-dir", p(run_dir)])
}

#[test]
fn config_prints_a_loadable_preset() {
    for args in [
        vec!["config", "bias-removal"],
        vec!["config", "extreme-bias", "--variant", "eb2", "--seed", "4"],
        vec!["config", "multi-attribute"],
    ] {
        let o = jlu(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let cfg = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
        cfg.validate().unwrap();
    }
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_config(tmp.path()));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = jlu(&["gen-data", "--config", p(&cfg), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["train.csv", "test.csv", "secondary.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(a.join("train.csv")).unwrap();
    assert!(header.starts_with("f0,"));
    assert!(header.lines().next().unwrap().ends_with("y_primary,y_gender"));
    assert_eq!(header.lines().count(), 241);

    let again = jlu(&["gen-data", "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    let forced = jlu(&["gen-data", "--config", p(&cfg), "--out", p(&a), "--force"]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn malformed_configs_exit_2_and_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&tiny_config(tmp.path()).to_json()).unwrap();
    v["train"]["learning_rate_typo"] = 0.1.into();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, v.to_string()).unwrap();
    let o = train(&bad, &tmp.path().join("r"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate_typo"), "{}", stderr(&o));

    let mut cfg = tiny_config(tmp.path());
    cfg.train.base_lr = -1.0;
    let neg = write_config(tmp.path(), "neg.json", &cfg);
    let o = train(&neg, &tmp.path().join("r"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("base_lr"), "{}", stderr(&o));

    let missing = jlu(&["train", "--config", p(&tmp.path().join("nope.json"))]);
    assert_eq!(code(&missing), 4);
    assert_eq!(code(&jlu(&["train"])), 2);
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let path = write_config(tmp.path(), "c.json", &cfg);
    let o = jlu(&["train", "--config", p(&path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = cfg.output_dir.join(cfg.run_name());
    assert!(cfg.run_name().starts_with("bias-removal-3-"));
    for net in ["baseline", "jlu"] {
        let metrics = fs::read_to_string(dir.join(net).join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + cfg.train.epochs);
        assert!(metrics.starts_with("epoch,primary_acc,primary_adj_acc"));
        let emb = fs::read_to_string(dir.join(net).join("embeddings.csv")).unwrap();
        assert_eq!(emb.lines().count(), 161);
        assert!(dir.join(net).join("checkpoint.jlub").is_file());
    }
    assert!(!dir.join(".incomplete").exists());
    assert!(!dir.join(".lock").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], cfg.hash());

    let again = jlu(&["train", "--config", p(&path)]);
    assert_eq!(code(&again), 0);
    assert!(String::from_utf8_lossy(&again.stdout).contains("already complete"));
}

#[test]
fn baseline_mode_has_no_secondary_heads() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.mode = Mode::Baseline;
    let path = write_config(tmp.path(), "c.json", &cfg);
    let dir = tmp.path().join("run");
    assert_eq!(code(&train(&path, &dir)), 0);
    assert!(!dir.join("jlu").exists());
    let bundle = jlu::checkpoint::load_bundle(dir.join("baseline/checkpoint.jlub")).unwrap();
    assert!(bundle.secondary_heads.is_empty());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &tiny_config(tmp.path()));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train(&path, &a)), 0);
    assert_eq!(code(&train(&path, &b)), 0);
    for f in [
        "baseline/metrics.csv",
        "baseline/embeddings.csv",
        "jlu/metrics.csv",
        "jlu/embeddings.csv",
        "summary.json",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_and_locking_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let path = write_config(tmp.path(), "c.json", &cfg);
    let dir = tmp.path().join("run");

    // an interrupted run: sentinel and config but no summary
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".incomplete"), "").unwrap();
    fs::write(dir.join("config.json"), cfg.to_json()).unwrap();
    assert_eq!(code(&train(&path, &dir)), 2);

    fs::write(dir.join(".lock"), "1").unwrap();
    let locked = jlu(&["train", "--config", p(&path), "--run-dir", p(&dir), "--resume"]);
    assert_eq!(code(&locked), 3);
    assert!(stderr(&locked).contains("locked"));
    fs::remove_file(dir.join(".lock")).unwrap();

    let resumed = jlu(&["train", "--config", p(&path), "--run-dir", p(&dir), "--resume"]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    assert!(dir.join("summary.json").is_file());

    let mut other = cfg.clone();
    other.train.alpha = 0.5;
    let other_path = write_config(tmp.path(), "other.json", &other);
    let o = jlu(&["train", "--config", p(&other_path), "--run-dir", p(&dir), "--resume"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hash"));
}

fn trained_with_data(tmp: &Path) -> (PathBuf, PathBuf) {
    let path = write_config(tmp, "c.json", &tiny_config(tmp));
    let data = tmp.join("data");
    assert_eq!(code(&jlu(&["gen-data", "--config", p(&path), "--out", p(&data)])), 0);
    let dir = tmp.join("run");
    assert_eq!(code(&train(&path, &dir)), 0);
    (dir, data.join("test.csv"))
}

#[test]
fn eval_export_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, test) = trained_with_data(tmp.path());
    let blind = dir.join("jlu/checkpoint.jlub");
    let base = dir.join("baseline/checkpoint.jlub");

    let o = jlu(&["eval", "--checkpoint", p(&blind), "--dataset", p(&test)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["tasks"][0]["name"], "gender");
    assert_eq!(v["samples"], 160);

    let o = jlu(&[
        "eval", "--checkpoint", p(&base), "--dataset", p(&test), "--baseline", p(&base),
    ]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let pct = v["tasks"][0]["percent_unlearned"].as_f64();
    assert!(pct.is_none() || pct == Some(0.0), "{pct:?}");

    let o = jlu(&["eval", "--checkpoint", p(&blind), "--dataset", p(&test), "--probe", "hair"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hair"));

    let out = tmp.path().join("emb/e.csv");
    let o = jlu(&["export-embeddings", "--checkpoint", p(&blind), "--dataset", p(&test), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 161);
    assert_eq!(text, fs::read_to_string(dir.join("jlu/embeddings.csv")).unwrap());

    let csv = tmp.path().join("report.csv");
    let o = jlu(&["report", p(&dir), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().nth(1).unwrap().contains(",gender,2,"));
}

#[test]
fn report_skips_incomplete_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, _) = trained_with_data(tmp.path());
    let partial = tmp.path().join("partial");
    fs::create_dir_all(&partial).unwrap();
    fs::write(partial.join(".incomplete"), "").unwrap();

    let o = jlu(&["report", p(&dir), p(&partial)]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("partial"));
    let only = jlu(&["report", p(&partial)]);
    assert_eq!(code(&only), 3);
}
