//! Training objectives, parameter groups, AdamW with decoupled group
//! learning rates, and the single-step training driver.

mod check;
mod objectives;
mod optim;
mod trainer;

pub use check::gradcheck_model;
pub use objectives::{combined, combined_loss, ddpm_loss, lm_loss, lm_targets};
pub use optim::{
    adamw_step, clip_grad_norm, partition_params, AdamState, Group, ParamGroups,
};
pub use trainer::{step_rng, StepMetrics, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the diffusion loss.
    pub lambda: f64,
    pub eta_image: f64,
    /// `eta_text / eta_image`.
    pub lr_ratio: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Final learning rate of the image group; the text group ends at the
    /// same fraction of its own peak.
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 5.0,
            eta_image: 1e-4,
            lr_ratio: 0.0,
            warmup_steps: 4000,
            total_steps: 250_000,
            lr_final: 1.5e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short-budget settings for toy runs: a higher peak rate, a short
    /// warmup, larger batches and a lighter diffusion weight. The
    /// final/peak rate ratio of the defaults is kept.
    pub fn desk(total_steps: u64) -> Self {
        let eta_image = 1e-2;
        TrainConfig {
            lambda: 1.0,
            eta_image,
            warmup_steps: (total_steps / 20).max(1),
            total_steps,
            lr_final: eta_image * 0.15,
            batch_size: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.lr_ratio) {
            return bad("train.lr_ratio must lie in [0, 1]");
        }
        if !(self.eta_image > 0.0) {
            return bad("train.eta_image must be positive");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("train.warmup_steps must be below train.total_steps");
        }
        if !(self.lr_final >= 0.0) || !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("train.lr_final, train.lambda and train.weight_decay must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("train.adam_eps must be positive and train.grad_clip nonnegative");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        Ok(())
    }

    fn peak(&self, group: Group) -> f64 {
        match group {
            Group::Image => self.eta_image,
            Group::Text => self.lr_ratio * self.eta_image,
        }
    }
}

/// Linear warmup from 0 to the group's peak, then cosine decay to the
/// group's final rate at `total_steps`. Steps beyond the budget hold the
/// final rate.
pub fn lr_at_step(step: u64, cfg: &TrainConfig, group: Group) -> f64 {
    let peak = cfg.peak(group);
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let end = cfg.lr_final * peak / cfg.eta_image;
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    end + 0.5 * (peak - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig {
            total_steps: 10_000,
            ..Default::default()
        };
        assert_eq!(lr_at_step(0, &cfg, Group::Image), 0.0);
        assert_eq!(lr_at_step(4000, &cfg, Group::Image), 1e-4);
        assert!((lr_at_step(10_000, &cfg, Group::Image) - 1.5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(4000, &cfg, Group::Text), 0.0);
        let half = TrainConfig {
            lr_ratio: 0.1,
            ..cfg.clone()
        };
        assert!((lr_at_step(4000, &half, Group::Text) - 1e-5).abs() < 1e-18);
        assert!((lr_at_step(10_000, &half, Group::Text) - 1.5e-6).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_and_nonincreasing_after_warmup() {
        let cfg = TrainConfig {
            total_steps: 5000,
            lr_ratio: 0.1,
            ..Default::default()
        };
        for g in [Group::Text, Group::Image] {
            let before = lr_at_step(3999, &cfg, g);
            let at = lr_at_step(4000, &cfg, g);
            assert!(at - before <= cfg.peak(g) / 4000.0 + 1e-18);
            for s in 4000..5000 {
                assert!(lr_at_step(s + 1, &cfg, g) <= lr_at_step(s, &cfg, g));
            }
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk(3000).validate().is_ok());
        let bad = TrainConfig {
            lr_ratio: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_steps: 10,
            total_steps: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
