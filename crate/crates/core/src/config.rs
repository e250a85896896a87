//! Experiment configuration: one TOML file holding the root seed, dataset,
//! model, training and evaluation settings, plus dotted `key=value`
//! overrides applied on top of it.
//!
//! The defaults describe the standard synthetic benchmark. They differ from
//! the library defaults of [`TrainConfig`] and [`HeadConfig`](crate::head::HeadConfig)
//! in learning rate and its schedule, batch size, gradient clipping and
//! score threshold, which were tuned for a desk-scale run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::{standard_scenarios, ScenarioTable};
use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::DEFAULT_IOU;
use crate::model::ModelConfig;
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::train::{StageConfig, TrainConfig};

/// Scenario source meaning [`standard_scenarios`].
pub const STANDARD_SCENARIOS: &str = "standard";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// BEV IoU needed for a match.
    pub iou: f64,
    /// `"standard"` or a path to a scenario table.
    pub scenarios: String,
    /// Seeds of an ablation sweep; each reruns dataset, init and training.
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou: DEFAULT_IOU,
            scenarios: STANDARD_SCENARIOS.into(),
            ablation_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn benchmark_stage(epochs: usize) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 8,
        optimizer: OptimizerConfig {
            learning_rate: 2e-3,
            clip_norm: 5.0,
            schedule: LrSchedule::Constant,
            ..OptimizerConfig::default()
        },
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.head.score_threshold = 0.1;
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            model,
            train: TrainConfig {
                stage1: benchmark_stage(20),
                stage2: benchmark_stage(20),
                stage3: benchmark_stage(20),
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_text(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every section; called before any run.
    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        if self.dataset.scene.class_count != self.model.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model predicts {}",
                self.dataset.scene.class_count, self.model.classes
            )));
        }
        if self.dataset.scene.view != self.model.view {
            return Err(Error::Config("dataset and model view geometries differ".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.iou > 0.0 && self.eval.iou <= 1.0) {
            return Err(Error::Config("eval.iou must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Training settings carrying the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Resolves `eval.scenarios`, relative paths against `base`.
    pub fn scenario_table(&self, base: &Path) -> Result<ScenarioTable> {
        if self.eval.scenarios == STANDARD_SCENARIOS {
            return Ok(standard_scenarios());
        }
        ScenarioTable::load(&base.join(&self.eval.scenarios))
    }

    /// Applies `key=value` overrides. Keys are dotted paths to existing
    /// fields; values are TOML literals, with bare words taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            set_path(&mut root, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: ExperimentConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{key}`"));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(unknown)?;
    let mut table = root;
    for part in parts {
        table = table
            .get_mut(part)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(unknown)?;
    }
    let slot = table.get_mut(last).ok_or_else(unknown)?;
    // integers given for float fields would otherwise fail to deserialize
    *slot = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}
