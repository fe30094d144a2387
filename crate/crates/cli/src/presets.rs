//! Default configurations for the three experiments.

use jlu::datagen::{CentroidLayout, ExtremeBias, JointSpec, SyntheticSpec, TaskSpec};
use jlu::model::ModelConfig;
use jlu::trainer::{InnerPolicy, InnerStep, TrainConfig};

use crate::config::{
    DataSource, Experiment, Mode, RunConfig, SecondarySource, SyntheticData, CONFIG_VERSION,
};

fn task(name: &str, classes: usize, signal: f64, layout: CentroidLayout) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        classes,
        signal_scale: signal,
        layout,
    }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        alpha: 1.0,
        base_lr: 0.01,
        epochs: 30,
        seed,
        inner: InnerPolicy {
            step: InnerStep::Preconditioned,
            ..InnerPolicy::default()
        },
        inner_every: Some(25),
        ..TrainConfig::default()
    }
}

fn extreme_bias_train_config(seed: u64) -> TrainConfig {
    let base = train_config(seed);
    TrainConfig {
        alpha: 0.3,
        base_lr: 0.003,
        head_lr_boost: 1.0,
        epochs: 4,
        inner: InnerPolicy {
            l2: 1e-4,
            ..base.inner.clone()
        },
        ..base
    }
}

/// Correlated bias: age (4 ordinal classes) is the primary task, gender
/// follows age with strength 0.8 in the training split.
pub fn bias_removal(seed: u64) -> RunConfig {
    let spec = SyntheticSpec {
        input_dim: 16,
        tasks: vec![
            task("age", 4, 2.0, CentroidLayout::Ordinal),
            task("gender", 2, 1.2, CentroidLayout::Random),
        ],
        noise_sigma: 1.0,
        centroid_seed: seed,
        train_joint: JointSpec::Biased { rho: vec![0.8] },
        test_joint: JointSpec::Uniform,
    };
    run_config(Experiment::BiasRemoval, spec, 4000, 2000, seed)
}

/// Disjoint support: gender is the primary task and, in training, young
/// samples are all one gender and old samples the other.
pub fn extreme_bias(variant: ExtremeBias, seed: u64) -> RunConfig {
    let spec = SyntheticSpec {
        input_dim: 16,
        tasks: vec![
            task("gender", 2, 1.0, CentroidLayout::Random),
            task("age", 3, 2.0, CentroidLayout::Ordinal),
        ],
        noise_sigma: 1.0,
        centroid_seed: seed,
        train_joint: JointSpec::ExtremeBias {
            variant,
            buffered_task: "age".into(),
        },
        test_joint: JointSpec::Uniform,
    };
    let mut cfg = run_config(Experiment::ExtremeBias, spec, 4000, 1998, seed);
    cfg.train = extreme_bias_train_config(seed);
    cfg
}

/// Age as primary with gender, ancestry and pose all to be unlearned.
pub fn multi_attribute(seed: u64) -> RunConfig {
    let spec = SyntheticSpec {
        input_dim: 16,
        tasks: vec![
            task("age", 4, 2.0, CentroidLayout::Ordinal),
            task("gender", 2, 1.2, CentroidLayout::Random),
            task("ancestry", 4, 1.2, CentroidLayout::Random),
            task("pose", 3, 1.2, CentroidLayout::Ordinal),
        ],
        noise_sigma: 1.0,
        centroid_seed: seed,
        train_joint: JointSpec::Biased {
            rho: vec![0.5, 0.5, 0.5],
        },
        test_joint: JointSpec::Uniform,
    };
    run_config(Experiment::MultiAttribute, spec, 4000, 1920, seed)
}

fn run_config(
    experiment: Experiment,
    spec: SyntheticSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> RunConfig {
    RunConfig {
        version: CONFIG_VERSION,
        experiment,
        data: DataSource::Synthetic(SyntheticData {
            spec,
            n_train,
            n_test,
            n_secondary: None,
            secondary_source: SecondarySource::Unbiased,
            seed,
        }),
        model: ModelConfig::default(),
        train: train_config(seed),
        mode: Mode::Both,
        secondary_tasks: None,
        output_dir: "runs".into(),
    }
}

/// The default configuration for `experiment` (EB1 for extreme bias).
pub fn preset(experiment: Experiment, seed: u64) -> RunConfig {
    match experiment {
        Experiment::BiasRemoval | Experiment::Custom => {
            let mut c = bias_removal(seed);
            c.experiment = experiment;
            c
        }
        Experiment::ExtremeBias => extreme_bias(ExtremeBias::Eb1, seed),
        Experiment::MultiAttribute => multi_attribute(seed),
    }
}
