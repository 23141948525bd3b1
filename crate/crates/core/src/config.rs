//! Run configuration: one JSON document with typed sections, dotted-key
//! overrides and cross-section validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::ChannelConfig;
use crate::data::{load_csv_dataset, synth_generate, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub snr_grid: Vec<f64>,
    pub seed: u64,
    pub policies: Vec<String>,
    /// Confidence threshold of the `confidence` policy.
    pub tau: f64,
    /// Entropy threshold (bits) of the `entropy` policy.
    pub eta: f64,
    pub keep_prob: f64,
    /// Calibration weight of per-class thresholds.
    pub accuracy_weight: f64,
    pub savings_tol: f64,
    /// Penalty weights of the decision-network family used for matching.
    pub beta_set: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_grid: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            seed: 1,
            policies: ["always_early", "always_final", "gt_oracle", "confidence", "neural"]
                .map(String::from)
                .to_vec(),
            tau: 0.8,
            eta: 1.0,
            keep_prob: 0.5,
            accuracy_weight: 0.5,
            savings_tol: crate::eval::SAVINGS_TOL,
            beta_set: vec![0.01, 0.05, 0.1, 0.2, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthConfig,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub channel: ChannelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg = cfg.with_override(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the field at dotted `key`. The value is parsed as JSON, falling
    /// back to a plain string.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("checked"),
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            };
        }
        *slot = parsed;
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.channel.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.snr_grid.is_empty() || e.snr_grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("eval.snr_grid must be non-empty and finite".into()));
        }
        if !(0.0..=1.0).contains(&e.tau) || !(0.0..=1.0).contains(&e.keep_prob) || !(0.0..=1.0).contains(&e.accuracy_weight) {
            return Err(Error::Config("eval.tau, eval.keep_prob and eval.accuracy_weight must lie in [0, 1]".into()));
        }
        if !(e.eta >= 0.0) || !(e.savings_tol >= 0.0) {
            return Err(Error::Config("eval.eta and eval.savings_tol must be >= 0".into()));
        }
        if self.data.source == DataSource::Synth {
            let s = &self.data.synth;
            if s.num_classes != self.model.num_classes || s.geometry != self.model.input_shape {
                return Err(Error::Config(format!(
                    "data.synth (K={}, geometry {:?}) disagrees with model (K={}, input_shape {:?})",
                    s.num_classes, s.geometry, self.model.num_classes, self.model.input_shape
                )));
            }
            if s.num_classes < 2 || s.train_per_class == 0 || s.test_per_class == 0 || !(s.difficulty >= 0.0) {
                return Err(Error::Config("data.synth needs K >= 2, positive sizes and difficulty >= 0".into()));
            }
        } else if self.data.train_csv.is_none() || self.data.test_csv.is_none() {
            return Err(Error::Config("data.source csv needs data.train_csv and data.test_csv".into()));
        }
        Ok(())
    }

    pub fn dataset(&self, split: Split) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synth => synth_generate(&self.data.synth, split),
            DataSource::Csv => {
                let path = match split {
                    Split::Train => &self.data.train_csv,
                    Split::Test => &self.data.test_csv,
                };
                let path = path.as_ref().ok_or_else(|| Error::Config("csv path missing".into()))?;
                load_csv_dataset(path, self.model.input_shape, self.model.num_classes, split)
            }
        }
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_pretty_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"depth": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
        assert!(RunConfig::default().with_override("train.nope", "1").is_err());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::default()
            .with_override("train.beta", "0.2")
            .unwrap()
            .with_override("train.criterion", "bce_gt")
            .unwrap()
            .with_override("paths.out_dir", "/tmp/x")
            .unwrap()
            .with_override("train.td.temperature", "5")
            .unwrap();
        assert_eq!(cfg.train.beta, 0.2);
        assert_eq!(cfg.train.criterion, crate::train::Criterion::BceGt);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.train.td.temperature, 5.0);
        assert!(RunConfig::default().with_override("train.beta", "\"high\"").is_err());
    }

    #[test]
    fn cross_section_mismatch() {
        let cfg = RunConfig::default().with_override("model.num_classes", "5").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
