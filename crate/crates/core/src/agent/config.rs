use serde::{Deserialize, Serialize};

use crate::diffcore::AdamConfig;
use crate::error::{DarlError, Result};

/// How the domain discriminator shapes the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversarialMode {
    /// Joint loss `L_Q + β·L_D` with a gradient-reversal layer in front of the discriminator.
    #[serde(rename = "GRL")]
    Grl,
    /// Two-step domain confusion: train the discriminator, then push the
    /// encoder toward a uniform discriminator output.
    #[serde(rename = "ADV")]
    Adv,
    /// Plain SAC with random crops.
    #[serde(rename = "OFF")]
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub conv_filters: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub kernel: usize,
    pub z_dim: usize,
    pub hidden_dim: usize,
    pub disc_hidden: usize,
    pub crop_hw: usize,
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            conv_filters: vec![8, 16],
            conv_strides: vec![2, 2],
            kernel: 3,
            z_dim: 32,
            hidden_dim: 256,
            disc_hidden: 100,
            crop_hw: 36,
            action_dim: 2,
            log_std_min: -10.0,
            log_std_max: 2.0,
        }
    }
}

impl ArchConfig {
    /// Full-size networks: four 32-filter convs over 84×84 crops, 50-d features, 1024 hidden units.
    pub fn paper_scale() -> Self {
        Self {
            conv_filters: vec![32; 4],
            conv_strides: vec![2, 1, 1, 1],
            kernel: 3,
            z_dim: 50,
            hidden_dim: 1024,
            disc_hidden: 100,
            crop_hw: 84,
            action_dim: 2,
            log_std_min: -10.0,
            log_std_max: 2.0,
        }
    }

    /// Spatial extent after the conv stack, or `None` if a kernel no longer fits.
    pub fn conv_output_hw(&self) -> Option<usize> {
        let mut hw = self.crop_hw;
        for &s in &self.conv_strides {
            if hw < self.kernel || s == 0 {
                return None;
            }
            hw = (hw - self.kernel) / s + 1;
        }
        Some(hw)
    }

    pub fn flat_features(&self) -> Option<usize> {
        self.conv_output_hw()
            .map(|hw| hw * hw * self.conv_filters.last().copied().unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarlError::Config(m));
        if self.conv_filters.is_empty() || self.conv_filters.len() != self.conv_strides.len() {
            return bad("conv_filters and conv_strides must be non-empty and the same length".into());
        }
        if self.conv_filters.contains(&0) || self.kernel == 0 {
            return bad("conv filters and kernel must be positive".into());
        }
        if self.conv_output_hw().is_none() {
            return bad(format!("crop {} too small for the conv stack", self.crop_hw));
        }
        if self.z_dim == 0 || self.hidden_dim == 0 || self.disc_hidden == 0 || self.action_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log_std_min must be below log_std_max".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the domain loss in the joint encoder objective.
    pub beta: f64,
    /// Environment steps over which the reversal scale ramps up.
    pub lambda_ramp_steps: u64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub lr_disc: f64,
    pub beta1_actor: f64,
    pub beta1_critic: f64,
    pub beta1_alpha: f64,
    pub beta1_disc: f64,
    pub adam_beta2: f64,
    pub tau: f64,
    pub actor_update_every: u64,
    pub target_update_every: u64,
    pub init_temperature: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub adversarial_mode: AdversarialMode,
    pub target_entropy: f64,
    /// Crop obs and next_obs with the same offsets.
    pub shared_crop: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_ramp_steps: 50_000,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            lr_alpha: 1e-4,
            lr_disc: 1e-3,
            beta1_actor: 0.9,
            beta1_critic: 0.9,
            beta1_alpha: 0.5,
            beta1_disc: 0.9,
            adam_beta2: 0.999,
            tau: 0.005,
            actor_update_every: 2,
            target_update_every: 2,
            init_temperature: 0.1,
            batch_size: 32,
            gamma: 0.99,
            adversarial_mode: AdversarialMode::Grl,
            target_entropy: -2.0,
            shared_crop: false,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarlError::Config(m));
        self.arch.validate()?;
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.lambda_ramp_steps == 0 {
            return bad("lambda_ramp_steps must be positive".into());
        }
        if self.actor_update_every == 0 || self.target_update_every == 0 || self.batch_size == 0 {
            return bad("update cadences and batch size must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.init_temperature > 0.0) {
            return bad("init_temperature must be positive".into());
        }
        let lrs = [self.lr_actor, self.lr_critic, self.lr_alpha, self.lr_disc];
        let b1 = [
            self.beta1_actor,
            self.beta1_critic,
            self.beta1_alpha,
            self.beta1_disc,
            self.adam_beta2,
        ];
        if lrs.iter().any(|&l| !(l > 0.0)) || b1.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("learning rates must be positive and Adam betas in [0, 1)".into());
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64, beta1: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}
