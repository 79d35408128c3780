//! TOML configuration shared by the command-line subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::BundleConfig;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_STRIDE;
use crate::matching::{LmedsConfig, MatchConfig};
use crate::pairwise::RansacConfig;
use crate::pipeline::{PairProposal, PipelineConfig};
use crate::synthetic::SceneSpec;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "RIDGE_BUNDLE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pixel stride for alignment and point-cloud metrics.
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { stride: DEFAULT_STRIDE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub stride: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig { stride: 1 }
    }
}

/// Every tunable, one table per stage. Missing tables and keys keep their
/// defaults; unknown top-level tables are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pairs: PairProposal,
    pub matching: MatchConfig,
    pub lmeds: LmedsConfig,
    pub ransac: RansacConfig,
    pub bundle: BundleConfig,
    pub synth: SceneSpec,
    pub eval: EvalConfig,
    pub export: ExportConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            pairs: self.pairs.clone(),
            matching: self.matching,
            lmeds: self.lmeds,
            ransac: self.ransac,
            bundle: self.bundle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ransac.validate()?;
        self.bundle.validate()?;
        self.synth.validate()?;
        if self.eval.stride == 0 || self.export.stride == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.matching.k == 0 {
            return Err(Error::Config("matching k must be positive".into()));
        }
        Ok(())
    }
}

/// Thread cap from the environment, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}
