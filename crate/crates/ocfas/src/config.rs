//! Run configuration: one TOML file covering the model, trainer, vocabulary,
//! dataset registry, and protocol specs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ProtocolSpec;
use crate::model::ModelConfig;
use crate::prompt::VocabConfig;
use crate::train::TrainConfig;

/// Overrides the base directory for relative dataset registry paths.
pub const DATA_ROOT_ENV: &str = "OCFAS_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Toy,
    ExternalAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub backbone: Backbone,
    /// Registry ids whose train splits feed training; empty means every
    /// registered dataset.
    pub train_datasets: Vec<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
    /// Dataset id (O, C, M, I, ...) to directory root.
    pub datasets: BTreeMap<String, PathBuf>,
    pub protocols: Vec<ProtocolSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/out"),
            backbone: Backbone::Toy,
            train_datasets: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab: VocabConfig::default(),
            datasets: BTreeMap::new(),
            protocols: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file. Relative dataset paths resolve against
    /// `OCFAS_DATA_ROOT` when set, otherwise against the config's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .or_else(|| path.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        for root in config.datasets.values_mut() {
            if root.is_relative() {
                *root = base.join(&*root);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone != Backbone::Toy {
            return Err(Error::Config(
                "backbone \"external_adapter\" is not available in this build; use \"toy\"".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        for id in &self.train_datasets {
            self.dataset_path(id)?;
        }
        for (id, root) in &self.datasets {
            if !root.is_dir() {
                return Err(Error::Config(format!(
                    "dataset {id:?}: directory {} does not exist",
                    root.display()
                )));
            }
        }
        for spec in &self.protocols {
            if spec.repetitions == 0 {
                return Err(Error::Config(format!(
                    "protocol {}: repetitions must be positive",
                    spec.name
                )));
            }
            for id in spec.train_sources.iter().chain(&spec.test_sources) {
                if !self.datasets.contains_key(id) {
                    return Err(Error::Config(format!(
                        "protocol {}: dataset {id:?} is not in the registry",
                        spec.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self, id: &str) -> Result<&PathBuf> {
        self.datasets
            .get(id)
            .ok_or_else(|| Error::Config(format!("dataset {id:?} is not in the registry")))
    }

    /// The ids used for training: the configured subset, or every registered
    /// dataset when none are listed.
    pub fn training_ids(&self) -> Vec<String> {
        if self.train_datasets.is_empty() {
            self.datasets.keys().cloned().collect()
        } else {
            self.train_datasets.clone()
        }
    }

    pub fn protocol(&self, name: &str) -> Result<&ProtocolSpec> {
        self.protocols
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("no protocol named {name:?} in the config")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_toml() {
        let config: RunConfig = toml::from_str("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.train.learning_rate, 1e-5);
        assert_eq!(config.model.d_emb, 64);
    }

    #[test]
    fn round_trip_preserves_semantics() {
        let mut config = RunConfig::default();
        config.train.seed = 7;
        config.datasets.insert("O".into(), PathBuf::from("/tmp/o"));
        config.protocols.push(ProtocolSpec {
            name: "loo".into(),
            train_sources: vec!["O".into()],
            test_sources: vec!["O".into()],
            unseen_attack: Some("print".into()),
            repetitions: 2,
        });
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn load_resolves_relative_dataset_paths() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.toml");
        std::fs::write(&config_path, "[datasets]\nS = \"data/synth\"\n").unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        assert_eq!(config.datasets["S"], dir.path().join("data/synth"));
    }

    #[test]
    fn validate_flags_missing_dataset_directory() {
        let mut config = RunConfig::default();
        config.datasets.insert("X".into(), PathBuf::from("/nonexistent/x"));
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("X"), "{err}");
    }

    #[test]
    fn validate_flags_unknown_protocol_source() {
        let mut config = RunConfig::default();
        config.protocols.push(ProtocolSpec {
            name: "p".into(),
            train_sources: vec!["Z".into()],
            test_sources: vec![],
            unseen_attack: None,
            repetitions: 1,
        });
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn external_backbone_is_rejected() {
        let config = RunConfig { backbone: Backbone::ExternalAdapter, ..RunConfig::default() };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn bad_toml_is_config_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "not = [valid").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bad.toml"));
    }
}
