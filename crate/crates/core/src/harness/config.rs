use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::head::LossWeights;

pub const ENV_SEED: &str = "RAGTRACK_SEED";
pub const ENV_OUT: &str = "RAGTRACK_OUT";

/// Optimizer and augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Consecutive frames per training sample.
    pub clip_len: usize,
    /// Maximum search-window shift as a fraction of the window side.
    pub jitter: f64,
    /// Maximum relative change of the search-window side.
    pub scale_jitter: f64,
    /// Maximum crop rotation in degrees.
    pub rotation_deg: f64,
    pub grayscale_prob: f64,
    /// Frames used for the fixed before/after loss evaluation.
    pub eval_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_len: 2,
            jitter: 0.25,
            scale_jitter: 0.1,
            rotation_deg: 5.0,
            grayscale_prob: 0.1,
            eval_frames: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub encoder: EncoderConfig,
    /// Search-token retention ratio.
    pub gamma: f64,
    /// Channel exchange ratio.
    pub sigma: f64,
    /// Knowledge-base capacity `n`.
    pub kb_capacity: usize,
    /// Retrieved entries `k`.
    pub retrieve_k: usize,
    /// Knowledge-base novelty threshold.
    pub lambda: f64,
    pub update_threshold: f64,
    pub update_interval: usize,
    pub loss_weights: LossWeights,
    /// Search window side over `sqrt(w·h)` of the target.
    pub search_factor: f64,
    /// Template window side over `sqrt(w·h)` of the target.
    pub template_factor: f64,
    /// Hidden width multiplier of the fusion and reasoning MLPs.
    pub mlp_ratio: usize,
    pub pr_threshold: f64,
    pub npr_threshold: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            gamma: 0.85,
            sigma: 0.5,
            kb_capacity: 4,
            retrieve_k: 2,
            lambda: 1.0,
            update_threshold: 0.65,
            update_interval: 5,
            loss_weights: LossWeights::default(),
            search_factor: 2.0,
            template_factor: 1.0,
            mlp_ratio: 2,
            pr_threshold: 20.0,
            npr_threshold: 0.2,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad("sigma must lie in [0, 1]");
        }
        if self.kb_capacity == 0 || self.retrieve_k == 0 {
            return bad("kb_capacity and retrieve_k must be positive");
        }
        if self.update_interval == 0 {
            return bad("update_interval must be positive");
        }
        if self.search_factor <= 0.0 || self.template_factor <= 0.0 {
            return bad("crop factors must be positive");
        }
        if self.train.clip_len == 0 {
            return bad("train.clip_len must be positive");
        }
        if self.loss_weights.lambda_iou < 0.0 || self.loss_weights.lambda_l1 < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Applies `RAGTRACK_SEED` if set.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED}={s} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_json() {
        let d = TrackerConfig::default();
        d.validate().unwrap();
        let cfg: TrackerConfig = serde_json::from_str(r#"{"gamma": 0.5, "train": {"steps": 3}}"#).unwrap();
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.lr, d.train.lr);
        assert_eq!(cfg.encoder, d.encoder);
        let bad = TrackerConfig { sigma: 1.5, ..d };
        assert!(bad.validate().is_err());
    }
}
