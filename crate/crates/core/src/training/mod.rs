//! Adversarial, WGAN and distillation training, classifier training and
//! teacher selection.

mod config;
mod log;
mod loops;
mod select;
mod steps;

pub use config::{
    ClassifierConfig, GenLoss, LossKind, TrainConfig, DEFAULT_ALPHA, DEFAULT_BATCH, DEFAULT_CLIP,
    DEFAULT_CRITIC_STEPS, DEFAULT_EVAL_INTERVAL,
};
pub use log::{LogRecord, RunLog};
pub use loops::{
    accuracy, derive_seed, sample_images, train_adversarial, train_classifier, train_distill,
    AdversarialRun, DistillRun, Snapshot,
};
pub use select::{pick_best, select_teacher, Candidate, Evaluator, GeneratorScores, Selection, SelectionMetric};
pub use steps::{
    adversarial_gradient, critic_objective, discriminator_objective, distill_joint_step,
    distill_mse_step, gan_step, joint_gradient, mse_gradient, wgan_step, GanLosses, JointLosses,
    WganLosses,
};
