//! Run configuration: a TOML file, then `CORRNAV_*` environment overrides.
//!
//! Environment variables map onto keys as
//! `CORRNAV_SEED` -> `seed` and `CORRNAV_PPO__LR` -> `[ppo] lr`: strip the
//! prefix, lowercase, and split sections on `__`. Values are parsed as TOML
//! (`4`, `1e-4`, `true`, `[0, 1]`) and fall back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::CueVariant;
use crate::perception::EncoderConfig;
use crate::policy::{NetConfig, PolicyConfig};
use crate::training::{PpoConfig, RewardConfig, TrainConfig};
use crate::worldsim::GoalCameraSetting;

pub const ENV_PREFIX: &str = "CORRNAV_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesConfig {
    pub size: usize,
    pub wall_density: f64,
    pub n_train_scenes: usize,
    pub n_test_scenes: usize,
    pub train_episodes_per_scene: usize,
    pub test_episodes_per_scene: usize,
    /// Goal-camera setting of the training episodes.
    pub train_setting: GoalCameraSetting,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            size: 8,
            wall_density: 0.0,
            n_train_scenes: 8,
            n_test_scenes: 2,
            train_episodes_per_scene: 100,
            test_episodes_per_scene: 100,
            train_setting: GoalCameraSetting::AgentMatched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: CueVariant,
    /// Square image side; also the number of camera rays.
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: CueVariant::DirectionAware, image_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Episodes stepped together by one controller.
    pub batch: usize,
    pub settings: Vec<GoalCameraSetting>,
    /// Pixels per grid cell in trajectory images.
    pub upscale: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], batch: 32, settings: GoalCameraSetting::ALL.to_vec(), upscale: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<CueVariant>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { variants: CueVariant::ALL.to_vec(), seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Forces a single thread.
    pub deterministic: bool,
    pub scenes: ScenesConfig,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            threads: 0,
            deterministic: false,
            scenes: ScenesConfig::default(),
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn net(&self) -> NetConfig {
        NetConfig {
            variant: self.model.variant,
            image_size: self.model.image_size,
            encoder: self.encoder.clone(),
            policy: self.policy.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let s = &self.scenes;
        if s.size < 8 {
            return bad(format!("scenes.size must be at least 8, got {}", s.size));
        }
        if !(0.0..=0.4).contains(&s.wall_density) {
            return bad(format!("scenes.wall_density must be in [0, 0.4], got {}", s.wall_density));
        }
        if s.n_train_scenes == 0
            || s.n_test_scenes == 0
            || s.train_episodes_per_scene == 0
            || s.test_episodes_per_scene == 0
        {
            return bad("scene and episode counts must be positive".into());
        }
        if self.model.image_size < 8 {
            return bad(format!("model.image_size must be at least 8, got {}", self.model.image_size));
        }
        self.net().validate().map_err(ConfigError::Invalid)?;
        self.reward.validate().map_err(ConfigError::Invalid)?;
        self.ppo.validate().map_err(ConfigError::Invalid)?;
        if let Some(t) = self.train.target_sr {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("train.target_sr must be in [0, 1], got {t}"));
            }
        }
        if self.train.eval_every > 0 && self.train.eval_episodes == 0 {
            return bad("train.eval_episodes must be positive when train.eval_every is set".into());
        }
        if self.eval.seeds.is_empty() || self.eval.batch == 0 || self.eval.upscale == 0 {
            return bad("eval.seeds must be non-empty; eval.batch and eval.upscale positive".into());
        }
        if self.ablate.variants.is_empty() || self.ablate.seeds.is_empty() {
            return bad("ablate.variants and ablate.seeds must be non-empty".into());
        }
        Ok(())
    }

    /// Worker threads after applying the determinism flag.
    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `(name, value)` pairs whose name starts with [`ENV_PREFIX`].
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let path: Vec<String> = name[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) || path.len() > 2 {
            return Err(ConfigError::Parse(format!("cannot map environment variable {name} to a config key")));
        }
        let mut node = &mut *table;
        for section in &path[..path.len() - 1] {
            let entry = node.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Parse(format!("{name}: `{section}` is not a section")))?;
        }
        node.insert(path[path.len() - 1].clone(), parse_value(&raw));
    }
    Ok(())
}

/// Parses TOML text with overrides from `vars`, without validating.
pub fn parse_config<I>(text: &str, vars: I) -> Result<RunConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    apply_env_overrides(&mut table, vars)?;
    RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Reads an optional config file and applies the process environment.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    parse_config(&text, std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config("", vars(&[])).unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(parse_config(&text, vars(&[])).unwrap(), RunConfig::default());
    }

    #[test]
    fn file_values_and_env_overrides() {
        let text = "seed = 3\n[ppo]\nlr = 0.001\nnum_envs = 4\n[model]\nvariant = \"dense\"\n";
        let env = vars(&[
            ("CORRNAV_PPO__LR", "5e-4"),
            ("CORRNAV_SEED", "9"),
            ("CORRNAV_EVAL__SEEDS", "[4, 5]"),
            ("CORRNAV_OUT_DIR", "/tmp/x y"),
            ("HOME", "/root"),
        ]);
        let c = parse_config(text, env).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.ppo.lr, 5e-4);
        assert_eq!(c.ppo.num_envs, 4);
        assert_eq!(c.model.variant, CueVariant::Dense);
        assert_eq!(c.eval.seeds, vec![4, 5]);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x y"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config("sed = 1", vars(&[])).is_err());
        assert!(parse_config("[ppo]\nlearning_rate = 1.0", vars(&[])).is_err());
        assert!(parse_config("", vars(&[("CORRNAV_PPO__BOGUS", "1")])).is_err());
        assert!(parse_config("", vars(&[("CORRNAV_A__B__C", "1")])).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.ppo.clip_eps = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.scenes.size = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.image_size = 30;
        assert!(c.validate().is_err());
        let c = RunConfig { deterministic: true, threads: 8, ..RunConfig::default() };
        assert_eq!(c.effective_threads(), 1);
    }
}
