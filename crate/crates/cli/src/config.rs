//! Optional TOML configuration. Every key is optional; flags override it.
//!
//! ```toml
//! [profile]
//! threshold = 0.5
//! normalization = "global"      # or "per-layer"
//!
//! [guidance.entropy]
//! lambda_c = 0.25
//! lambda_d = 0.75
//! threshold = 0.3
//! otsu_bins = 256
//! connectivity = "8"
//!
//! [guidance.fusion]
//! alpha = 0.4
//! top_k = 8
//! temperature = 0.1
//! scope = "survivors"           # or "all-candidates"
//!
//! [guidance.bbox]
//! theta = 0.5
//! pad = 1
//! min_side = 2
//! connectivity = "8"
//! ```

use std::path::Path;

use serde::Deserialize;

use havc::guidance::GuidanceParams;
use havc::profiler::NormalizationScope;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub threshold: f64,
    pub normalization: NormalizationScope,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            normalization: NormalizationScope::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub profile: ProfileConfig,
    pub guidance: GuidanceParams,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::data(format!("config {}: {e}", path.display())))
    }
}
