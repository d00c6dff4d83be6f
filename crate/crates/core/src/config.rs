//! Run configuration. On disk it is a flat JSON object whose keys are dotted
//! paths into [`RunConfig`], e.g. `"model.blocks": 6`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::DatasetConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::CacheMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Independent timestep per segment.
    pub asymmetric: bool,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-3,
            asymmetric: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub sampler_steps: usize,
    pub overlap: usize,
    pub cache_mode: CacheMode,
    pub use_cache: bool,
    pub color_correct: bool,
    /// Spatial tile size in HQ pixels; `None` processes whole frames.
    pub tile: Option<usize>,
    pub tile_overlap: usize,
    pub dump_caches: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            sampler_steps: 15,
            overlap: 1,
            cache_mode: CacheMode::LastStep,
            use_cache: true,
            color_correct: true,
            tile: None,
            tile_overlap: 8,
            dump_caches: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub profile_rows: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { profile_rows: vec![16] }
    }
}

/// File locations. Stored in the config so a run can be replayed from it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub flow: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: None,
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DatasetConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Nested object to dotted keys. Arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    let mut out = Map::new();
    flatten_into("", value, &mut out);
    out
}

/// Dotted keys back to a nested object.
pub fn unflatten(flat: &Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("key {key:?} conflicts with a scalar")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

impl RunConfig {
    pub fn to_flat(&self) -> Map<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serialises"))
    }

    /// Parses a flat config; keys starting with `run.` are run metadata and
    /// are ignored. Missing keys take their defaults.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let filtered: Map<String, Value> = flat
            .iter()
            .filter(|(k, _)| !k.starts_with("run."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        serde_json::from_value(unflatten(&filtered)?).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        match value {
            Value::Object(map) => Self::from_flat(&map),
            _ => Err(Error::Config("config must be a JSON object".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.infer.sampler_steps == 0 || self.infer.sampler_steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sampler steps must be in 1..={}",
                self.schedule.steps
            )));
        }
        if self.infer.overlap >= self.model.segment_length {
            return Err(Error::Config("segment overlap must be shorter than a segment".into()));
        }
        Ok(())
    }
}
