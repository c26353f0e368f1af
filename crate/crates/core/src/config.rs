//! Run configuration file: a TOML document with `[enhancer]` and `[train]`
//! tables. Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::enhancer::EnhancerConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub enhancer: EnhancerConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk-scale network with the standard training settings.
    fn default() -> Self {
        RunConfig {
            enhancer: EnhancerConfig::toy(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, filling every missing key from [`RunConfig::default`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let given: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| cfg_err(&e))?;
        merge(&mut merged, given);
        let cfg: RunConfig = merged.try_into().map_err(|e| cfg_err(&e))?;
        cfg.enhancer.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The file at `path`, or the defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
