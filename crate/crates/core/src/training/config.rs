use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Gan,
    Wgan,
    DistillMse,
    DistillJoint,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Gan => "gan",
            LossKind::Wgan => "wgan",
            LossKind::DistillMse => "distill_mse",
            LossKind::DistillJoint => "distill_joint",
        }
    }

    pub fn is_distillation(self) -> bool {
        matches!(self, LossKind::DistillMse | LossKind::DistillJoint)
    }
}

/// Generator side of the adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenLoss {
    /// Minimize -E[log D(G(z))].
    #[default]
    NonSaturating,
    /// Minimize E[log(1 - D(G(z)))].
    Saturating,
}

pub const DEFAULT_ALPHA: f64 = 1e-4;
pub const DEFAULT_CLIP: f32 = 0.01;
pub const DEFAULT_CRITIC_STEPS: usize = 5;
pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_EVAL_INTERVAL: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    /// Adversarial weight of the joint loss; joint distillation only.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_clip")]
    pub clip: f32,
    /// Critic updates per generator update (WGAN only).
    #[serde(default = "one")]
    pub critic_steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Generator updates.
    pub steps: usize,
    pub gen_optimizer: OptimizerConfig,
    pub disc_optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub gen_loss: GenLoss,
}

fn default_clip() -> f32 {
    DEFAULT_CLIP
}
fn one() -> usize {
    1
}
fn default_batch() -> usize {
    DEFAULT_BATCH
}
fn default_eval_interval() -> usize {
    DEFAULT_EVAL_INTERVAL
}

impl TrainConfig {
    fn base(loss_kind: LossKind, steps: usize, seed: u64) -> Self {
        TrainConfig {
            loss_kind,
            alpha: None,
            clip: DEFAULT_CLIP,
            critic_steps: 1,
            batch: DEFAULT_BATCH,
            steps,
            gen_optimizer: OptimizerConfig::gan_default(),
            disc_optimizer: OptimizerConfig::gan_default(),
            seed,
            eval_interval: DEFAULT_EVAL_INTERVAL,
            gen_loss: GenLoss::default(),
        }
    }

    pub fn gan(steps: usize, seed: u64) -> Self {
        Self::base(LossKind::Gan, steps, seed)
    }

    pub fn wgan(steps: usize, seed: u64) -> Self {
        TrainConfig {
            critic_steps: DEFAULT_CRITIC_STEPS,
            gen_optimizer: OptimizerConfig::wgan_generator_default(),
            disc_optimizer: OptimizerConfig::wgan_critic_default(),
            ..Self::base(LossKind::Wgan, steps, seed)
        }
    }

    pub fn distill_mse(steps: usize, seed: u64) -> Self {
        TrainConfig {
            gen_optimizer: OptimizerConfig::distill_default(),
            ..Self::base(LossKind::DistillMse, steps, seed)
        }
    }

    pub fn distill_joint(alpha: f64, steps: usize, seed: u64) -> Self {
        TrainConfig {
            alpha: Some(alpha),
            gen_optimizer: OptimizerConfig::distill_default(),
            ..Self::base(LossKind::DistillJoint, steps, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (self.loss_kind, self.alpha) {
            (LossKind::DistillJoint, None) => return bad("distill_joint requires alpha".into()),
            (LossKind::DistillJoint, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return bad(format!("alpha {a} outside [0, 1]"))
            }
            (k, Some(_)) if k != LossKind::DistillJoint => {
                return bad(format!("alpha is only meaningful for distill_joint, not {}", k.name()))
            }
            _ => {}
        }
        if self.critic_steps == 0 {
            return bad("critic_steps must be at least 1".into());
        }
        if self.loss_kind != LossKind::Wgan && self.critic_steps != 1 {
            return bad(format!("critic_steps must be 1 for {}", self.loss_kind.name()));
        }
        if self.loss_kind == LossKind::Wgan && !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad(format!("clip bound must be positive, got {}", self.clip));
        }
        if self.batch < 2 {
            return bad("batch size must be at least 2 for batch statistics".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        for (name, o) in [("generator", &self.gen_optimizer), ("discriminator", &self.disc_optimizer)] {
            if !(o.lr > 0.0 && o.lr.is_finite()) {
                return bad(format!("{name} learning rate must be positive, got {}", o.lr));
            }
        }
        Ok(())
    }

    /// Discriminator optimizer, with the clip bound imposed for WGAN.
    pub fn critic_optimizer(&self) -> OptimizerConfig {
        let mut o = self.disc_optimizer;
        if self.loss_kind == LossKind::Wgan {
            o.clip = Some(self.clip);
        }
        o
    }
}

/// Classifier training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Training accuracy the classifier is expected to reach.
    #[serde(default = "default_target_accuracy")]
    pub target_accuracy: f64,
}

fn default_target_accuracy() -> f64 {
    0.97
}

impl ClassifierConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        ClassifierConfig {
            steps,
            batch: DEFAULT_BATCH,
            optimizer: OptimizerConfig {
                kind: crate::autodiff::OptimizerKind::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                lr: 1e-3,
                clip: None,
            },
            seed,
            target_accuracy: default_target_accuracy(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_rules() {
        assert!(TrainConfig::distill_joint(1e-4, 10, 0).validate().is_ok());
        let mut c = TrainConfig::distill_joint(1e-4, 10, 0);
        c.alpha = None;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.alpha = Some(1.5);
        assert!(c.validate().is_err());
        let mut g = TrainConfig::gan(10, 0);
        g.alpha = Some(0.5);
        assert!(g.validate().is_err());
    }

    #[test]
    fn critic_steps_rules() {
        assert_eq!(TrainConfig::wgan(10, 0).critic_steps, 5);
        assert!(TrainConfig::wgan(10, 0).validate().is_ok());
        let mut g = TrainConfig::gan(10, 0);
        g.critic_steps = 5;
        assert!(g.validate().is_err());
    }

    #[test]
    fn critic_optimizer_carries_clip() {
        let mut c = TrainConfig::wgan(1, 0);
        c.clip = 0.05;
        assert_eq!(c.critic_optimizer().clip, Some(0.05));
        assert_eq!(TrainConfig::gan(1, 0).critic_optimizer().clip, None);
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig::distill_joint(1e-4, 3000, 7);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"loss_kind\":\"distill_joint\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    }
}
