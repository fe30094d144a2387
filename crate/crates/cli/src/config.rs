//! Run configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use jlu::datagen::SyntheticSpec;
use jlu::model::{Architecture, HeadSpec, ModelConfig};
use jlu::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    BiasRemoval,
    ExtremeBias,
    MultiAttribute,
    Custom,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::BiasRemoval => "bias-removal",
            Experiment::ExtremeBias => "extreme-bias",
            Experiment::MultiAttribute => "multi-attribute",
            Experiment::Custom => "custom",
        }
    }
}

/// Which networks `train` produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Jlu,
    #[default]
    Both,
}

impl Mode {
    pub fn networks(self) -> &'static [Network] {
        match self {
            Mode::Baseline => &[Network::Baseline],
            Mode::Jlu => &[Network::Jlu],
            Mode::Both => &[Network::Baseline, Network::Jlu],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Network {
    Baseline,
    Jlu,
}

impl Network {
    pub fn as_str(self) -> &'static str {
        match self {
            Network::Baseline => "baseline",
            Network::Jlu => "jlu",
        }
    }
}

/// Where the secondary (spurious-task) training data comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondarySource {
    /// The primary training set, with its spurious labels.
    Same,
    /// A separate sample drawn from the spec's test joint (independent labels).
    #[default]
    Unbiased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Size of the separate secondary sample; defaults to `n_train`.
    #[serde(default)]
    pub n_secondary: Option<usize>,
    #[serde(default)]
    pub secondary_source: SecondarySource,
    pub seed: u64,
}

impl SyntheticData {
    pub fn n_secondary(&self) -> usize {
        self.n_secondary.unwrap_or(self.n_train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: PathBuf,
    pub test: PathBuf,
    /// Secondary training data; the primary training file is used when absent.
    #[serde(default)]
    pub secondary: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticData),
    Files(FileData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub experiment: Experiment,
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mode: Mode,
    /// Spurious tasks to unlearn; all spurious tasks of the data when absent.
    #[serde(default)]
    pub secondary_tasks: Option<Vec<String>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Validation(m));
        if self.version != CONFIG_VERSION {
            return invalid(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        self.train.validate().map_err(CliError::from_config)?;
        if self.train.epochs == 0 {
            return invalid("train.epochs must be at least 1".into());
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.spec.validate().map_err(CliError::from_config)?;
            if s.n_train == 0 {
                return invalid("data.synthetic.n_train must be positive".into());
            }
            if s.n_secondary() == 0 {
                return invalid("data.synthetic.n_secondary must be positive".into());
            }
            let cells: usize = s.spec.dims().iter().product();
            if s.n_test == 0 || s.n_test % cells != 0 {
                return invalid(format!(
                    "data.synthetic.n_test={} must be a positive multiple of {cells} label cells",
                    s.n_test
                ));
            }
            let names: Vec<&str> = s.spec.tasks[1..].iter().map(|t| t.name.as_str()).collect();
            self.check_secondary_names(&names)?;
            let arch = self.architecture(&s.spec)?;
            arch.validate().map_err(CliError::from_config)?;
            let m = self.secondary_names(&names).len();
            if !self.train.betas.is_empty() && self.train.betas.len() != m {
                return invalid(format!(
                    "train.betas has {} entries for {m} secondary tasks",
                    self.train.betas.len()
                ));
            }
        }
        Ok(())
    }

    fn architecture(&self, spec: &SyntheticSpec) -> Result<Architecture, CliError> {
        let heads = |t: &jlu::datagen::TaskSpec| HeadSpec {
            name: t.name.clone(),
            classes: t.classes,
        };
        Ok(Architecture::mlp(
            &self.model,
            spec.input_dim,
            heads(&spec.tasks[0]),
            spec.tasks[1..].iter().map(heads).collect(),
        ))
    }

    pub fn check_secondary_names(&self, available: &[&str]) -> Result<(), CliError> {
        if let Some(names) = &self.secondary_tasks {
            for n in names {
                if !available.contains(&n.as_str()) {
                    return Err(CliError::Validation(format!(
                        "secondary task '{n}' is not a spurious task of the data (have: {})",
                        available.join(", ")
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn secondary_names(&self, available: &[&str]) -> Vec<String> {
        match &self.secondary_tasks {
            Some(names) => names.clone(),
            None => available.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// SHA-256 over the canonical JSON of everything except `output_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-{}",
            self.experiment.as_str(),
            self.train.seed,
            &self.hash()[..8]
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;

    #[test]
    fn presets_validate_and_round_trip() {
        for e in [
            Experiment::BiasRemoval,
            Experiment::ExtremeBias,
            Experiment::MultiAttribute,
        ] {
            let cfg = preset(e, 3);
            cfg.validate().unwrap();
            let back = RunConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let mut v: serde_json::Value =
            serde_json::from_str(&preset(Experiment::BiasRemoval, 1).to_json()).unwrap();
        v["train"]["alpah"] = serde_json::json!(0.5);
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("alpah"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = preset(Experiment::BiasRemoval, 1);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert!(b.run_name().starts_with("bias-removal-2-"));
        assert_eq!(b.run_name().len(), "bias-removal-2-".len() + 8);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = preset(Experiment::BiasRemoval, 1);
        c.train.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = preset(Experiment::BiasRemoval, 1);
        c.version = 7;
        assert!(c.validate().unwrap_err().to_string().contains("version 7"));
        let mut c = preset(Experiment::BiasRemoval, 1);
        c.secondary_tasks = Some(vec!["height".into()]);
        assert!(c.validate().unwrap_err().to_string().contains("height"));
        let mut c = preset(Experiment::BiasRemoval, 1);
        if let DataSource::Synthetic(s) = &mut c.data {
            s.n_test = 1001;
        }
        assert!(c.validate().is_err());
    }
}
