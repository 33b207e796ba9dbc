//! Flat key-value run configuration.
//!
//! A config file is a TOML document with no tables: every key names one
//! field of [`TrainerConfig`], [`RewardConfig`] or [`PolicyConfig`], or is
//! `budgets`. Missing keys keep their defaults; unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::policy::{BudgetSet, PolicyConfig};
use crate::reward::RewardConfig;
use crate::scene::SceneSpec;
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub budgets: BudgetSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trainer: TrainerConfig::default(),
            reward: RewardConfig::default(),
            policy: PolicyConfig::default(),
            budgets: BudgetSet::toy(),
        }
    }
}

fn to_table<T: Serialize>(v: &T) -> Table {
    match Value::try_from(v) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config sections serialize to tables"),
    }
}

fn section<T: DeserializeOwned>(t: Table, what: &str) -> Result<T> {
    Value::Table(t)
        .try_into()
        .map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let base = RunConfig::default();
        let mut trainer = to_table(&base.trainer);
        let mut reward = to_table(&base.reward);
        let mut policy = to_table(&base.policy);
        let mut budgets = base.budgets;
        for (key, value) in doc {
            if key == "budgets" {
                budgets = section_value(value, "budgets")?;
            } else if trainer.contains_key(&key) {
                trainer.insert(key, value);
            } else if reward.contains_key(&key) {
                reward.insert(key, value);
            } else if policy.contains_key(&key) {
                policy.insert(key, value);
            } else {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let cfg = RunConfig {
            trainer: section(trainer, "trainer")?,
            reward: section(reward, "reward")?,
            policy: section(policy, "policy")?,
            budgets,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.reward.validate()?;
        if self.reward.kappa_max != self.budgets.max() {
            return Err(Error::Validation {
                field: "kappa_max",
                reason: format!("{} differs from max budget {}", self.reward.kappa_max, self.budgets.max()),
            });
        }
        Ok(())
    }

    /// Flat table with every key, sorted.
    pub fn to_table(&self) -> Table {
        let mut t = to_table(&self.trainer);
        t.extend(to_table(&self.reward));
        t.extend(to_table(&self.policy));
        t.insert("budgets".into(), Value::try_from(&self.budgets).expect("budgets serialize"));
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("flat table serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses a scene-generation file: the [`SceneSpec`] fields plus an optional
/// `count` of scenes, generated with consecutive seeds. `seed` replaces the
/// file's seed when given.
pub fn parse_scene_batch(text: &str, seed: Option<u64>) -> Result<(SceneSpec, u64)> {
    let mut doc: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let count = match doc.remove("count") {
        Some(v) => match v.as_integer() {
            Some(c) if c >= 1 => c as u64,
            _ => return Err(Error::Config("count must be a positive integer".into())),
        },
        None => 1,
    };
    let mut spec = to_table(&SceneSpec::default());
    for (key, value) in doc {
        if !spec.contains_key(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        spec.insert(key, value);
    }
    let mut spec: SceneSpec = section(spec, "scene")?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok((spec, count))
}

fn section_value<T: DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    v.try_into().map_err(|e| Error::Config(format!("{what}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn keys_route_to_sections() {
        let cfg = RunConfig::parse(
            "lr = 0.001\nstage = \"rl\"\nlambda_budget = 0.2\nheads = 2\nruntime_source = \"measured\"\n",
        )
        .unwrap();
        assert_eq!(cfg.trainer.lr, 0.001);
        assert_eq!(cfg.trainer.stage, crate::trainer::Stage::Rl);
        assert_eq!(cfg.reward.lambda_budget, 0.2);
        assert_eq!(cfg.policy.heads, 2);
        assert_eq!(cfg.reward.runtime_source, crate::reward::RuntimeSource::Measured);
    }

    #[test]
    fn unknown_and_bad_keys_fail() {
        let e = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(e.to_string().contains("learning_rate"));
        assert!(RunConfig::parse("lr = \"fast\"").is_err());
        assert!(RunConfig::parse("budgets = [4, 4]").is_err());
        assert_eq!(RunConfig::parse("lr = -1.0").unwrap_err().kind(), "validation");
    }

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.budgets = BudgetSet::new(vec![2, 4]).unwrap();
        cfg.reward.kappa_max = 4;
        cfg.trainer.entropy_weight = 0.02;
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
