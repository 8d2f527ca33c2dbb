//! Engine configuration, read from a TOML key-value file.
//!
//! ```toml
//! R_max = 8.0
//! swell_k = 1.0
//! knn_k = 50
//! crops = [[64, 64], [128, 64], [128, 128]]
//! margin = 8
//! budget = 2097152
//! lambda = 2.0
//! C = 64
//! K = 4
//! M = 32
//! seed = 0
//! ```
//!
//! Every key is optional; missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Crop sizes (width, height), by ascending area.
pub const DEFAULT_CROPS: [(u32, u32); 8] = [
    (64, 64),
    (128, 64),
    (128, 128),
    (256, 128),
    (256, 256),
    (512, 256),
    (512, 512),
    (1024, 512),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(rename = "R_max")]
    pub r_max: f64,
    pub swell_k: f64,
    pub knn_k: usize,
    pub crops: Vec<(u32, u32)>,
    pub margin: u32,
    /// Pixel budget; `None` means four full-resolution images.
    pub budget: Option<u64>,
    pub lambda: f64,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "K")]
    pub blocks: usize,
    #[serde(rename = "M")]
    pub embedding: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            r_max: 8.0,
            swell_k: 1.0,
            knn_k: 50,
            crops: DEFAULT_CROPS.to_vec(),
            margin: 8,
            budget: None,
            lambda: 2.0,
            channels: 64,
            blocks: 4,
            embedding: 32,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: EngineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.r_max > 0.0) {
            return bad(format!("R_max must be positive, got {}", self.r_max));
        }
        if !(self.swell_k >= 0.0) {
            return bad(format!("swell_k must be >= 0, got {}", self.swell_k));
        }
        if self.knn_k == 0 {
            return bad("knn_k must be >= 1".into());
        }
        if self.crops.is_empty() || self.crops.iter().any(|&(w, h)| w == 0 || h == 0) {
            return bad("crops must be a non-empty list of positive sizes".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.budget == Some(0) {
            return bad("budget must be positive".into());
        }
        if self.blocks == 0 || self.channels == 0 || self.channels % self.blocks != 0 {
            return bad(format!(
                "C ({}) must be a positive multiple of K ({})",
                self.channels, self.blocks
            ));
        }
        if self.embedding == 0 {
            return bad("M must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = EngineConfig::from_toml("").unwrap();
        assert_eq!(cfg, EngineConfig::default());
        let cfg = EngineConfig::from_toml("R_max = 20.0\nK = 2\nC = 8\ncrops = [[64, 64]]").unwrap();
        assert_eq!(cfg.r_max, 20.0);
        assert_eq!(cfg.blocks, 2);
        assert_eq!(cfg.crops, vec![(64, 64)]);
        assert_eq!(EngineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            EngineConfig::from_toml("C = 10\nK = 4"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            EngineConfig::from_toml("nonsense = 1"),
            Err(ConfigError::Syntax(_))
        ));
        assert!(matches!(
            EngineConfig::from_toml("R_max = -1.0"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
