//! Run configuration: one JSON document with a schema tag, plus dotted-path
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use csmil::clustering::KMeansConfig;
use csmil::datamodel::SynthConfig;
use csmil::evalx::experiments::DEFAULT_GAMMA_GRID;
use csmil::evalx::CvConfig;
use csmil::model::ModelConfig;
use csmil::optim::TrainConfig;
use csmil::recovery::PhaseConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

pub const SCHEMA: &str = "csmil-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    pub data: DataPaths,
    pub synth: SynthConfig,
    pub kmeans: KMeansConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvSettings,
    pub sweep: SweepSettings,
    pub ablation: AblationSettings,
    pub recovery: RecoverySettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: SCHEMA.into(),
            seed: 0,
            data: DataPaths::default(),
            synth: SynthConfig::default(),
            kmeans: KMeansConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cv: CvSettings::default(),
            sweep: SweepSettings::default(),
            ablation: AblationSettings::default(),
            recovery: RecoverySettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

/// Input locations, relative to the working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub manifest: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Frozen centers for `train` and checkpoint evaluation.
    pub clusters: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSettings {
    pub folds: usize,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings { folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub gamma_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            k_grid: vec![2, 3, 5, 10],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Keep the configured `gamma` and a trainable `beta`.
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverySettings {
    pub phase: PhaseConfig,
    /// Design used for coherence and restricted-eigenvalue diagnostics.
    pub diagnostics_k: usize,
    pub diagnostics_m: usize,
    pub support_sizes: Vec<usize>,
    /// `(s, K)` pairs for the minimal-M scaling fit; empty skips it.
    pub scaling_pairs: Vec<(usize, usize)>,
    pub scaling_target: f64,
}

impl Default for RecoverySettings {
    fn default() -> Self {
        RecoverySettings {
            phase: PhaseConfig::default(),
            diagnostics_k: 16,
            diagnostics_m: 134,
            support_sizes: vec![1, 2, 3, 4],
            scaling_pairs: Vec::new(),
            scaling_target: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub seeds: u64,
    pub k_values: Vec<usize>,
    pub bags: usize,
    pub dim: usize,
    pub hidden: usize,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            seeds: 20,
            k_values: vec![1, 2, 3],
            bags: 3,
            dim: 3,
            hidden: 2,
            h: 1e-6,
            tolerance: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Failure::Config(format!("invalid config: {e}")))?;
        cfg.check_schema()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|f| match f {
            Failure::Config(msg) => Failure::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn check_schema(&self) -> Result<(), Failure> {
        if self.schema != SCHEMA {
            return Err(Failure::Config(format!(
                "unsupported schema {:?}, expected {SCHEMA:?}",
                self.schema
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the JSON form;
    /// values are parsed as JSON and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, Failure> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Failure::Config(format!("override {item:?} is not KEY=VALUE")))?;
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Failure::Config(format!("invalid override: {e}")))?;
        cfg.check_schema()?;
        Ok(cfg)
    }

    /// Applies the root seed to every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            kmeans: self.kmeans.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), Failure> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Failure::Config(format!("bad override key {key:?}")));
    }
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), value);
                    return Ok(());
                }
                map.entry((*part).to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Failure::Config(format!("{key}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Failure::Config(format!("{key}: index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Failure::Config(format!("{key}: {part:?} is not inside an object"))),
        };
    }
    unreachable!("loop returns on the last key part")
}
