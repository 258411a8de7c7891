//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use metaction_core::control_fit::FitConfig;
use metaction_core::kinematics::ActionGrid;
use metaction_core::labeler::LabelConfig;
use metaction_core::metrics::ComplianceConfig;
use metaction_core::policy::{Policy, PolicyConfig};
use metaction_core::sim::SimConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::scene_io::{read_text, FormatError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Read(#[from] FormatError),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub horizon: usize,
    pub warmup: usize,
    pub temperature: f64,
    pub foundation_agents: Vec<u32>,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            horizon: s.horizon,
            warmup: s.warmup,
            temperature: s.temperature,
            foundation_agents: s.foundation_agents,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: ActionGrid,
    pub labels: LabelConfig,
    pub fit: FitConfig,
    pub policy: PolicyConfig,
    /// Parameters to load; without one the policy is freshly initialised
    /// from `seed`.
    pub checkpoint: Option<PathBuf>,
    pub sim: SimSection,
    /// Shortest label run counted by `evaluate`, frames.
    pub min_run: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: ActionGrid::default(),
            labels: LabelConfig::default(),
            fit: FitConfig::default(),
            policy: PolicyConfig::default(),
            checkpoint: None,
            sim: SimSection::default(),
            min_run: ComplianceConfig::default().min_run,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`. A relative checkpoint path is
    /// resolved against the config file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let mut cfg = Self::from_toml(&read_text(path)?, &path.display().to_string())?;
        if let (Some(ck), Some(dir)) = (cfg.checkpoint.as_mut(), path.parent()) {
            if ck.is_relative() {
                *ck = dir.join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.grid.validate().map_err(|e| invalid(&e))?;
        self.labels.validate().map_err(|e| invalid(&e))?;
        self.fit.validate().map_err(|e| invalid(&e))?;
        self.policy.validate().map_err(|e| invalid(&e))?;
        self.sim_config().validate().map_err(|e| invalid(&e))?;
        if self.min_run == 0 {
            return Err(ConfigError::Invalid("min_run must be at least 1".into()));
        }
        self.check_bins(&self.policy)
    }

    fn check_bins(&self, policy: &PolicyConfig) -> Result<(), ConfigError> {
        if self.grid.size() != policy.action_bins {
            return Err(ConfigError::Invalid(format!(
                "grid has {} bins but the policy predicts {}",
                self.grid.size(),
                policy.action_bins
            )));
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            horizon: self.sim.horizon,
            warmup: self.sim.warmup,
            temperature: self.sim.temperature,
            grid: self.grid,
            labels: self.labels,
            foundation_agents: self.sim.foundation_agents.clone(),
        }
    }

    pub fn compliance(&self) -> ComplianceConfig {
        ComplianceConfig {
            min_run: self.min_run,
            skip: self.sim.warmup,
            labels: self.labels,
        }
    }

    /// The checkpoint if configured, else a fresh policy.
    pub fn load_policy(&self) -> Result<Policy, ConfigError> {
        let policy = match &self.checkpoint {
            Some(path) => checkpoint::load(path)?,
            None => Policy::new(self.policy.clone(), self.seed).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        };
        self.check_bins(&policy.config)?;
        Ok(policy)
    }
}
