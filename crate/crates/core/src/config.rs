//! Run configuration, loadable from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{InterpConfig, OptConfig, Variant};
use crate::lowfat::SpaceConfig;
use crate::report::ReportMode;
use crate::runtime::META_SIZE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
}

/// ```toml
/// mode = "log"          # log | count | abort=N
/// variant = "full"      # full | bounds | type
/// instrument = true
///
/// [space]
/// seed = 7
///
/// [optimize]
/// subsumed_bounds = false
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub mode: ReportMode,
    pub variant: Variant,
    /// Run the program without any checks when false.
    pub instrument: bool,
    pub optimize: OptConfig,
    pub space: SpaceConfig,
    pub step_limit: u64,
    pub max_depth: u32,
    pub meta_size: u64,
}

impl Default for Config {
    fn default() -> Self {
        let i = InterpConfig::default();
        Config {
            mode: i.mode,
            variant: Variant::Full,
            instrument: true,
            optimize: OptConfig::default(),
            space: i.space,
            step_limit: i.step_limit,
            max_depth: i.max_depth,
            meta_size: META_SIZE,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn interp(&self) -> InterpConfig {
        InterpConfig {
            space: self.space.clone(),
            mode: self.mode,
            step_limit: self.step_limit,
            max_depth: self.max_depth,
            meta_size: self.meta_size,
        }
    }

    /// Label recorded in reports.
    pub fn variant_label(&self) -> String {
        if self.instrument {
            self.variant.to_string()
        } else {
            "none".to_string()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn round_trip() {
        let mut c = Config { mode: ReportMode::AbortAfter(3), variant: Variant::Bounds, ..Config::default() };
        c.space.seed = 42;
        c.optimize.redundant_narrow = false;
        let text = c.to_toml();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_tables_and_errors() {
        let c = Config::from_toml("mode = \"count\"\n[space]\nseed = 9\n").unwrap();
        assert_eq!(c.mode, ReportMode::CountOnly);
        assert_eq!(c.space.seed, 9);
        assert_eq!(c.space.classes, SpaceConfig::default().classes);
        assert!(Config::from_toml("mode = \"loud\"").is_err());
        assert!(Config::from_toml("colour = 1").is_err());
    }
}
