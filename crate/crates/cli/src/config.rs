//! Run configuration: one JSON document merged over defaults, then `--set` overrides.

use crate::error::CliError;
use sapi::dataset::ExtractConfig;
use sapi::model::ModelConfig;
use sapi::simgen::{BehaviorMix, IntersectionKind, ScenarioSpec};
use sapi::train_eval::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSettings {
    pub count: usize,
    /// Cycled over scenario indices.
    pub intersection_kinds: Vec<IntersectionKind>,
    /// Cycled over scenario indices.
    pub lanes_per_approach: Vec<u32>,
    pub agent_count: u32,
    pub behavior_mix: BehaviorMix,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        ScenarioSettings {
            count: 100,
            intersection_kinds: vec![IntersectionKind::FourLeg, IntersectionKind::TType],
            lanes_per_approach: vec![1, 2, 3],
            agent_count: 6,
            behavior_mix: BehaviorMix::default(),
        }
    }
}

impl ScenarioSettings {
    /// Generation settings of scenario `index` for a run seeded with `seed`.
    pub fn spec(&self, seed: u64, index: usize) -> ScenarioSpec {
        ScenarioSpec {
            intersection_kind: self.intersection_kinds[index % self.intersection_kinds.len()],
            lanes_per_approach: self.lanes_per_approach[index % self.lanes_per_approach.len()],
            agent_count: self.agent_count,
            behavior_mix: self.behavior_mix,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSettings {
    pub extract: ExtractConfig,
    pub split_ratio: [u32; 3],
    /// Keep at most this many randomly chosen windows per agent track.
    pub windows_per_agent: Option<usize>,
    /// Store rasters in the archive instead of re-rendering them from scenarios.
    pub inline_rasters: bool,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        DatasetSettings { extract: ExtractConfig::default(), split_ratio: [3, 1, 1], windows_per_agent: Some(4), inline_rasters: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives scenario generation and the split.
    pub seed: u64,
    pub scenarios: ScenarioSettings,
    pub dataset: DatasetSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenarios: ScenarioSettings::default(),
            dataset: DatasetSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` (dot separated) inside `root`; `raw` is parsed as JSON, falling back to a string.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut keys = path.split('.').peekable();
    let mut cur = root;
    while let Some(k) = keys.next() {
        let obj = cur.as_object_mut().ok_or_else(|| CliError::Invalid(format!("--set {path}: `{k}` is not inside an object")))?;
        if !obj.contains_key(k) {
            return Err(CliError::Invalid(format!("--set {path}: unknown key `{k}`")));
        }
        if keys.peek().is_none() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(k).expect("checked above");
    }
    Err(CliError::Invalid("--set needs a non-empty key".into()))
}

impl RunConfig {
    /// Defaults, then the optional config file, then `key=value` overrides, then `seed`.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
            merge(&mut tree, doc);
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Invalid(format!("--set expects key=value, got `{o}`")))?;
            set_path(&mut tree, k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            tree["seed"] = s.into();
            tree["train"]["seed"] = s.into();
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        let s = &self.scenarios;
        if s.intersection_kinds.is_empty() || s.lanes_per_approach.is_empty() {
            return invalid("scenarios.intersection_kinds and scenarios.lanes_per_approach must be non-empty".into());
        }
        for i in 0..s.lanes_per_approach.len() {
            s.spec(self.seed, i).validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        }
        let ex = &self.dataset.extract;
        ex.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        if self.dataset.split_ratio.iter().sum::<u32>() == 0 {
            return invalid("dataset.split_ratio must have a positive sum".into());
        }
        if self.dataset.windows_per_agent == Some(0) {
            return invalid("dataset.windows_per_agent must be at least 1".into());
        }
        self.model.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        let m = &self.model;
        if (m.m, m.n, m.raster_height, m.raster_width) != (ex.m, ex.n, ex.raster.height_px, ex.raster.width_px) {
            return invalid(format!(
                "model (m={}, n={}, raster {}x{}) disagrees with dataset.extract (m={}, n={}, raster {}x{})",
                m.m, m.n, m.raster_height, m.raster_width, ex.m, ex.n, ex.raster.height_px, ex.raster.width_px
            ));
        }
        Ok(())
    }
}
