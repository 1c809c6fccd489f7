//! Run configuration, loaded from a TOML file.
//!
//! ```toml
//! taps = "auto"            # or ["relu2", "relu3", "logits"]
//! tau = 16
//! k = 50
//! ig_steps = 50
//! seed = 0
//!
//! [tau_per_tap]
//! relu1 = 3
//!
//! [patches]
//! scales = [1.0, 0.5, 0.25]
//! overlap = 0.5
//!
//! [grouping]
//! max_clusters = 10
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupingConfig;
use crate::model_io::{TapConfig, TapSpec};
use crate::patching::PatchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub taps: TapConfig,
    /// Core-set size used when a tap has no entry in `tau_per_tap`.
    pub tau: usize,
    /// Core-set size per child tap, keyed by tap name.
    pub tau_per_tap: BTreeMap<String, usize>,
    pub k: usize,
    pub ig_steps: usize,
    pub seed: u64,
    pub patches: PatchConfig,
    pub grouping: GroupingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            taps: TapConfig::auto(),
            tau: 16,
            tau_per_tap: BTreeMap::new(),
            k: 50,
            ig_steps: 50,
            seed: 0,
            patches: PatchConfig::default(),
            grouping: GroupingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.tau_per_tap.values().any(|&t| t == 0) {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be at least 1".into()));
        }
        self.patches.validate()?;
        self.grouping.validate()
    }

    /// Core-set size for children at `tap`, capped at the tap width.
    pub fn tau_for(&self, tap: &str, width: usize) -> usize {
        self.tau_per_tap.get(tap).copied().unwrap_or(self.tau).min(width)
    }

    /// Sets τ to a quarter of each tap's width (at least 1).
    pub fn with_quarter_width_tau(mut self, taps: &TapSpec) -> Self {
        for t in taps.taps() {
            self.tau_per_tap.insert(t.name.clone(), (t.width / 4).max(1));
        }
        self
    }
}
