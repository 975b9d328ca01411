//! Experiment configuration, strategy runners, reports and comparison tables.

mod compare;
mod experiment;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HpptError, Result};
use crate::model::train::TrainConfig;
use crate::model::ModelConfig;
use crate::refine::RefineConfig;
use crate::stream::StreamConfig;

pub use compare::{compare, Comparison, ComparisonRow};
pub use experiment::{
    evaluate, thread_pool, write_outputs, EpisodeSummary, Experiment, RefineSummary, Report, RunOutput, SweepRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Hppt,
    SeqFinetune,
    Independent,
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Hppt, Strategy::SeqFinetune, Strategy::Independent, Strategy::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Hppt => "hppt",
            Strategy::SeqFinetune => "seq_finetune",
            Strategy::Independent => "independent",
            Strategy::Joint => "joint",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = HpptError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                HpptError::Config(format!(
                    "unknown strategy {s:?}; expected one of hppt, seq_finetune, independent, joint"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Also write `model.json` and `tree.json`.
    pub save_model: bool,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub refine: RefineConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Hppt,
            seed: 0,
            tau: 0.5,
            out: None,
            save_model: false,
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            refine: RefineConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(HpptError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        self.model.validate()?;
        self.refine.validate()?;
        self.train.validate()?;
        if self.model.n_max < self.stream.max_parts {
            return Err(HpptError::Config(format!(
                "model.n_max ({}) is smaller than stream.max_parts ({})",
                self.model.n_max, self.stream.max_parts
            )));
        }
        Ok(())
    }

    /// Stream settings with the experiment seed applied.
    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            seed: self.seed,
            ..self.stream.clone()
        }
    }

    /// Defaults, overlaid by an optional TOML file, overlaid by `section.key=value`
    /// overrides (values parsed as TOML, falling back to plain strings).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(ExperimentConfig::default())
            .map_err(|e| HpptError::Config(format!("defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HpptError::Config(format!("cannot read {}: {e}", path.display())))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| HpptError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(table));
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| HpptError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HpptError::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn apply_override(value: &mut toml::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| HpptError::Config(format!("override {item:?} is not key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cursor = value;
    let keys: Vec<&str> = path.trim().split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| HpptError::Config(format!("{path}: {key} is not a section")))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        cursor = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(HpptError::Config(format!("empty override key in {item:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_is_overrides_then_file_then_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 4\n[refine]\ngamma = 0.2\nsteps = 3\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &["refine.steps=7".into(), "strategy=joint".into()]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.refine.gamma, 0.2);
        assert_eq!(cfg.refine.steps, 7);
        assert_eq!(cfg.strategy, Strategy::Joint);
        assert_eq!(cfg.refine.alpha, 0.001);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in ["refine.gamma=1.5", "strategy=greedy", "model.depths=[3, 2, 1]", "train.nope=1", "tau=2.0"] {
            let err = ExperimentConfig::load(None, &[bad.into()]).unwrap_err();
            assert!(matches!(err, HpptError::Config(_)), "{bad}: {err}");
        }
        assert!(ExperimentConfig::load(None, &["garbage".into()]).is_err());
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
    }
}
