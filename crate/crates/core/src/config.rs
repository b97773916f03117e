//! Run configuration: one TOML file plus `key=value` overrides on dotted paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Split;
use crate::gateway::BackendConfig;
use crate::pipeline::{config_hash, PredictorChoice, StrategyConfig};
use crate::prompt::CotStyle;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}` (expected key=value)")]
    Override(String),
    #[error("{what} {path} does not exist")]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Files a run reads or writes. Unset inputs are simply not used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub reason_bank: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub sidecar_scores: Option<PathBuf>,
    /// Scripted responses; when set, no network backend is used.
    pub mock_script: Option<PathBuf>,
    pub response_cache: Option<PathBuf>,
    pub audit_log: Option<PathBuf>,
    pub bm25_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    /// Split of the notes being corrected.
    pub split: Split,
    pub failure_ceiling: f64,
    pub reason_style: CotStyle,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { split: Split::Test, failure_ceiling: 0.5, reason_style: CotStyle::Brief }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub run: RunSettings,
    pub strategy: StrategyConfig,
    pub backend: BackendConfig,
    /// Backend used to write reasons for the in-context examples.
    pub reason_backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            run: RunSettings::default(),
            strategy: StrategyConfig::default(),
            backend: BackendConfig::inference(),
            reason_backend: BackendConfig::reason_generation(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, or as a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{assignment}: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if given), applies overrides in order and deserializes.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the settings that can change predictions.
    pub fn semantic_hash(&self) -> String {
        config_hash(&self.strategy, &self.backend)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.strategy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.backend.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.reason_backend.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.run.failure_ceiling) {
            return Err(ConfigError::Invalid(format!("failure_ceiling {} is outside [0, 1]", self.run.failure_ceiling)));
        }
        let p = &self.paths;
        let inputs = [
            ("train set", &p.train),
            ("validation set", &p.valid),
            ("test set", &p.test),
            ("sidecar score file", &p.sidecar_scores),
            ("mock script", &p.mock_script),
        ];
        for (what, path) in inputs {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(ConfigError::MissingPath { what, path: path.clone() });
                }
            }
        }
        if let PredictorChoice::Offline { path } = &self.strategy.predictor {
            if !Path::new(path).exists() {
                return Err(ConfigError::MissingPath { what: "offline span predictions", path: path.into() });
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self, split: Split) -> Option<&Path> {
        match split {
            Split::Train => self.paths.train.as_deref(),
            Split::Valid => self.paths.valid.as_deref(),
            Split::Test => self.paths.test.as_deref(),
        }
    }
}
