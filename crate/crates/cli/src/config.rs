use std::path::Path;

use mvssm_core::pipeline::{BlockVariant, PipelineConfig};
use mvssm_core::sim::SceneConfig;
use mvssm_core::tokens::GroundBounds;
use mvssm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub num_scenes: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { num_scenes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Synthetic evaluation scenes; defaults to the validation split size.
    pub num_scenes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<BlockVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: BlockVariant::ALL.to_vec(),
        }
    }
}

/// Everything a command needs. `scene.rng_seed` is replaced by `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

/// The single-machine reference scenario.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            pipeline: PipelineConfig {
                num_layers: 3,
                num_tokens: 36,
                feature_dim: 64,
                points: 4,
                scales: 2,
                state_dim: 4,
                scan_dim: 16,
                ffn_dim: 64,
                head_dim: 64,
                token_bounds: GroundBounds::centered(3600.0, 3600.0),
                ..PipelineConfig::default()
            },
            scene: SceneConfig {
                actor_margin_mm: 2500.0,
                ..SceneConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                cls_weight: 1000.0,
                positives_per_gt: 3,
                val_scenes: 8,
                ..TrainConfig::default()
            },
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        if self.scene.channels != self.pipeline.feature_dim {
            return Err(CliError::Config(format!(
                "scene.channels ({}) must equal pipeline.feature_dim ({})",
                self.scene.channels, self.pipeline.feature_dim
            )));
        }
        if self.scene.strides.len() != self.pipeline.scales {
            return Err(CliError::Config(format!(
                "scene.strides has {} levels but pipeline.scales is {}",
                self.scene.strides.len(),
                self.pipeline.scales
            )));
        }
        if self.ablation.variants.is_empty() {
            return Err(CliError::Config("ablation.variants must not be empty".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            rng_seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn val_scene_config(&self) -> SceneConfig {
        SceneConfig {
            rng_seed: self.seed.wrapping_add(self.train.val_seed_offset),
            ..self.scene.clone()
        }
    }

    pub fn eval_scene_count(&self) -> usize {
        self.eval.num_scenes.unwrap_or(self.train.val_scenes)
    }
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Apply `key.path=value` overrides; every key must already exist.
pub fn apply_overrides(config: &RunConfig, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{set}` is not key=value")))?;
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?,
                _ => return Err(CliError::Config(format!("`{key}` does not name a field"))),
            };
        }
        *slot = parse_value(raw);
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

/// Overlay `patch` onto `base`; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parse a config file layered over the reference defaults.
pub fn from_json(text: &str) -> Result<RunConfig, CliError> {
    let patch: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut value, patch, "")?;
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut config = apply_overrides(&base, sets)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}
