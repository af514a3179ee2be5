use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::EnergyConfig;
use crate::eval::EvalConfig;
use crate::fit::FitConfig;
use crate::sir::SirConfig;
use crate::{Error, Result};

/// Every tunable of a run. Unknown keys are rejected and missing keys take
/// their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it by component name.
    pub seed: u64,
    pub energy: EnergyConfig,
    pub fit: FitConfig,
    pub sir: SirConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            energy: EnergyConfig::default(),
            fit: FitConfig::default(),
            sir: SirConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.fit.validate()?;
        self.sir.validate()?;
        self.eval.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Write the resolved config as `config.json` in `dir`.
    pub fn echo_into(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join("config.json");
        fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }
}
