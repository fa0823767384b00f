//! Run configuration: every key has a default, a user file overrides any subset,
//! and unknown keys are rejected with their full path.

use std::path::Path;

use imagedpo_core::datagen::{NegativeMode, WorldConfig};
use imagedpo_core::evalharness::Setting;
use imagedpo_core::imageops::{CorruptionSpec, FillMode, Rect};
use imagedpo_core::trainer::{Objective, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSection,
    pub corruption: CorruptionSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub seed: u64,
    pub scenes: usize,
    /// Benchmark groups written by `gen` (0 = none).
    pub bench_groups: usize,
    pub bench_seed: u64,
    pub params: WorldConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    /// Corruptions applied to every source triplet when building pairs.
    pub specs: Vec<CorruptionSpec>,
    /// Number of leading triplets used as pair sources.
    pub sources: usize,
    pub seed: u64,
    pub negative_mode: NegativeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Seed of the initial weights before pretraining.
    pub init_seed: u64,
    pub pretrain: TrainConfig,
    pub image_dpo: TrainConfig,
    pub text_dpo: TrainConfig,
    pub text_dpo_corrupted: TrainConfig,
}

impl TrainSection {
    pub fn for_objective(&self, objective: Objective) -> &TrainConfig {
        match objective {
            Objective::MlePretrain => &self.pretrain,
            Objective::ImageDpo => &self.image_dpo,
            Objective::TextDpo => &self.text_dpo,
            Objective::TextDpoCorrupted => &self.text_dpo_corrupted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub setting: Setting,
    pub blur_levels: Vec<f64>,
    pub pixelate_levels: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldSection {
                seed: 7,
                scenes: 500,
                bench_groups: 300,
                bench_seed: 11,
                params: WorldConfig::default(),
            },
            corruption: CorruptionSection {
                specs: vec![
                    CorruptionSpec::Blur { kernel_size: 9 },
                    CorruptionSpec::Semantic {
                        region: Rect {
                            x: 8,
                            y: 8,
                            width: 16,
                            height: 16,
                        },
                        fill: FillMode::Noise,
                    },
                ],
                sources: 128,
                seed: 7,
                negative_mode: NegativeMode::Random,
            },
            train: TrainSection {
                init_seed: 7,
                pretrain: TrainConfig::default_for(Objective::MlePretrain),
                image_dpo: TrainConfig::default_for(Objective::ImageDpo),
                text_dpo: TrainConfig::default_for(Objective::TextDpo),
                text_dpo_corrupted: TrainConfig::default_for(Objective::TextDpoCorrupted),
            },
            eval: EvalSection {
                setting: Setting::F,
                blur_levels: vec![1.0, 3.0, 7.0, 15.0, 31.0],
                pixelate_levels: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            },
        }
    }
}

/// Recursively overlays `patch` onto `base`; arrays and scalars replace wholesale.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

impl RunConfig {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, CliError> {
        let patch: Value = serde_json::from_str(text).map_err(|e| {
            CliError::Usage(format!("{origin}:{}: {e}", e.line()))
        })?;
        if !patch.is_object() {
            return Err(CliError::Usage(format!("{origin}: config must be a JSON object")));
        }
        let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, patch);
        let cfg: RunConfig = serde_path_to_error::deserialize(base).map_err(|e| {
            CliError::Usage(format!("{origin}: at `{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
                Self::from_json_str(&text, &p.display().to_string())
            }
        }
    }

    fn validate(&self, origin: &str) -> Result<(), CliError> {
        let at = |key: &str, e: imagedpo_core::Error| CliError::Usage(format!("{origin}: at `{key}`: {e}"));
        self.world.params.validate().map_err(|e| at("world.params", e))?;
        for (key, obj) in [
            ("train.pretrain", Objective::MlePretrain),
            ("train.image_dpo", Objective::ImageDpo),
            ("train.text_dpo", Objective::TextDpo),
            ("train.text_dpo_corrupted", Objective::TextDpoCorrupted),
        ] {
            let tc = self.train.for_objective(obj);
            if tc.objective != obj {
                return Err(CliError::Usage(format!(
                    "{origin}: at `{key}.objective`: expected {obj:?}, found {:?}",
                    tc.objective
                )));
            }
            tc.validate().map_err(|e| at(key, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json_str("{}", "x").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_override_keeps_siblings() {
        let cfg = RunConfig::from_json_str(r#"{"train": {"image_dpo": {"epochs": 3}}}"#, "x").unwrap();
        assert_eq!(cfg.train.image_dpo.epochs, 3);
        assert_eq!(cfg.train.image_dpo.batch_size, RunConfig::default().train.image_dpo.batch_size);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json_str(r#"{"train": {"pretrain": {"epoch": 3}}}"#, "c.json")
            .unwrap_err()
            .to_string();
        assert!(err.contains("c.json") && err.contains("train.pretrain") && err.contains("epoch"), "{err}");
        let err = RunConfig::from_json_str(r#"{"trian": {}}"#, "c.json").unwrap_err().to_string();
        assert!(err.contains("trian"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let err = RunConfig::from_json_str(r#"{"train": {"pretrain": {"epochs": 0}}}"#, "c.json")
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.pretrain"), "{err}");
        assert!(RunConfig::from_json_str("[1]", "c.json").is_err());
        assert!(RunConfig::from_json_str("{", "c.json").is_err());
    }
}
