use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::TrainConfig;
use crate::blockmdp::{make_domain_split, DomainSplit, EnvConfig};
use crate::diagnostics::EmbeddingConfig;
use crate::error::{DarlError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_train: 4,
            n_test: 2,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagConfig {
    /// Eval-policy episodes collected per domain.
    pub episodes: usize,
    pub embedding: EmbeddingConfig,
    pub probe_seed: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            episodes: 1,
            embedding: EmbeddingConfig::default(),
            probe_seed: 0,
        }
    }
}

/// Everything a run needs. Every field has a default, so `{}` is a valid config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub train_cfg: TrainConfig,
    pub split: SplitConfig,
    /// Simulator steps, counting action repeats.
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Agent steps with uniform random actions before learning starts.
    pub initial_steps: u64,
    pub replay_capacity: usize,
    pub run_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub diag: DiagConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            train_cfg: TrainConfig::default(),
            split: SplitConfig::default(),
            total_env_steps: 100_000,
            eval_every: 2000,
            eval_episodes: 10,
            initial_steps: 1000,
            replay_capacity: 100_000,
            run_seed: 0,
            out_dir: None,
            diag: DiagConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarlError::Config(m));
        self.env.validate()?;
        self.train_cfg.validate()?;
        let repeat = self.env.action_repeat as u64;
        if self.env.render_hw <= self.train_cfg.arch.crop_hw {
            return bad(format!(
                "render_hw {} must exceed crop_hw {}",
                self.env.render_hw, self.train_cfg.arch.crop_hw
            ));
        }
        if self.env.gamma != self.train_cfg.gamma {
            return bad(format!(
                "env.gamma {} differs from train_cfg.gamma {}",
                self.env.gamma, self.train_cfg.gamma
            ));
        }
        if self.eval_every == 0 || !self.eval_every.is_multiple_of(repeat) {
            return bad(format!(
                "eval_every {} must be a positive multiple of action_repeat {repeat}",
                self.eval_every
            ));
        }
        if !self.total_env_steps.is_multiple_of(self.eval_every) {
            return bad(format!(
                "total_env_steps {} is not a multiple of eval_every {}",
                self.total_env_steps, self.eval_every
            ));
        }
        if self.eval_episodes == 0 || self.replay_capacity == 0 {
            return bad("eval_episodes and replay_capacity must be positive".into());
        }
        if self.initial_steps < self.train_cfg.batch_size as u64 {
            return bad(format!(
                "initial_steps {} below batch_size {}",
                self.initial_steps, self.train_cfg.batch_size
            ));
        }
        if self.diag.episodes == 0 {
            return bad("diag.episodes must be positive".into());
        }
        self.domain_split()?;
        Ok(())
    }

    pub fn domain_split(&self) -> Result<DomainSplit> {
        make_domain_split(self.split.n_train, self.split.n_test, self.split.split_seed)
    }
}
