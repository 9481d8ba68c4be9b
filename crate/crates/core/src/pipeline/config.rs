use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerConfig;
use crate::data::{load_idx, synth_shapes, Dataset};
use crate::error::{Error, Result};
use crate::training::{LossKind, SelectionMetric, DEFAULT_ALPHA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synth {
        n: usize,
        size: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        target_size: Option<usize>,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synth { n, size, seed } => synth_shapes(*n, *size, *seed),
            DatasetSource::Idx {
                images,
                labels,
                target_size,
            } => load_idx(images, labels, *target_size),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        match self {
            DatasetSource::Synth { n, size, .. } => {
                if *n < 2 {
                    return Err(Error::Config(format!("{what}: synthetic dataset needs n >= 2")));
                }
                if *size != 8 && *size != 16 {
                    return Err(Error::Config(format!("{what}: synthetic size must be 8 or 16")));
                }
            }
            DatasetSource::Idx { images, labels, .. } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!("{what}: {} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSettings {
    pub grid: Vec<usize>,
    pub steps: usize,
    pub metric: SelectionMetric,
    /// `gan` or `wgan`; also used for the control generators.
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    /// Where the selected teacher is written and read; defaults to
    /// `<out>/teacher.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSettings {
    pub d: Vec<usize>,
    pub steps: usize,
    /// `distill_mse` or `distill_joint`.
    pub loss: LossKind,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Also train same-size generators regularly from scratch.
    #[serde(default)]
    pub controls: bool,
    /// Control step budget; defaults to the student budget.
    #[serde(default)]
    pub control_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSettings {
    pub d: usize,
    pub steps: usize,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub samples: usize,
    pub seed: u64,
    pub splits: usize,
}

/// Optimizer overrides; unset entries use the per-loss defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerBlock {
    #[serde(default)]
    pub generator: Option<OptimizerConfig>,
    #[serde(default)]
    pub discriminator: Option<OptimizerConfig>,
    #[serde(default)]
    pub distill: Option<OptimizerConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Held-out images for the real-side metric statistics; the training set
    /// is used when absent.
    #[serde(default)]
    pub reference: Option<DatasetSource>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub teacher: TeacherSettings,
    pub students: StudentSettings,
    pub classifier: ClassifierSettings,
    pub eval: EvalSettings,
    #[serde(default)]
    pub optimizers: OptimizerBlock,
    pub batch: usize,
    pub eval_interval: usize,
}

impl ExperimentConfig {
    /// 16x16 synthetic shapes: d = 16 teacher, d = 2 students and controls,
    /// 3000 steps each, five seeds.
    pub fn desk() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synth {
                n: 3000,
                size: 16,
                seed: 1,
            },
            reference: Some(DatasetSource::Synth {
                n: 1000,
                size: 16,
                seed: 99,
            }),
            out: PathBuf::from("runs"),
            seeds: vec![1, 2, 3, 4, 5],
            teacher: TeacherSettings {
                grid: vec![16],
                steps: 3000,
                metric: SelectionMetric::Fid,
                loss: LossKind::Gan,
                seed: 0,
                checkpoint: None,
            },
            students: StudentSettings {
                d: vec![2],
                steps: 3000,
                loss: LossKind::DistillMse,
                alpha: None,
                controls: true,
                control_steps: None,
            },
            classifier: ClassifierSettings {
                d: 8,
                steps: 400,
                batch: 32,
                seed: 0,
                checkpoint: None,
            },
            eval: EvalSettings {
                samples: 1000,
                seed: 123,
                splits: 10,
            },
            optimizers: OptimizerBlock::default(),
            batch: 64,
            eval_interval: 100,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("teacher.ckpt"))
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.classifier
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("classifier.ckpt"))
    }

    /// Checks every field that does not depend on files produced by earlier
    /// commands.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.dataset.validate("dataset")?;
        if let Some(r) = &self.reference {
            r.validate("reference")?;
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.teacher.grid.is_empty() || self.teacher.grid.contains(&0) {
            return bad("teacher grid must be non-empty with positive d values");
        }
        if self.students.d.is_empty() || self.students.d.contains(&0) {
            return bad("student d list must be non-empty with positive values");
        }
        if !matches!(self.teacher.loss, LossKind::Gan | LossKind::Wgan) {
            return bad("teacher loss must be gan or wgan");
        }
        match (self.students.loss, self.students.alpha) {
            (LossKind::DistillMse, None) => {}
            (LossKind::DistillMse, Some(_)) => return bad("alpha is only used by the joint loss"),
            (LossKind::DistillJoint, None) => return bad("loss distill_joint requires alpha"),
            (LossKind::DistillJoint, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return bad("alpha must lie in [0, 1]")
            }
            (LossKind::DistillJoint, Some(_)) => {}
            _ => return bad("student loss must be distill_mse or distill_joint"),
        }
        if self.teacher.steps == 0 || self.students.steps == 0 || self.students.control_steps == Some(0) {
            return bad("step budgets must be positive");
        }
        if self.batch < 2 || self.eval_interval == 0 {
            return bad("batch must be >= 2 and eval_interval >= 1");
        }
        if self.classifier.d == 0 || self.classifier.steps == 0 || self.classifier.batch < 2 {
            return bad("classifier needs d >= 1, steps >= 1 and batch >= 2");
        }
        if self.eval.samples < 2 || self.eval.splits == 0 || self.eval.splits > self.eval.samples {
            return bad("eval needs samples >= 2 and 1 <= splits <= samples");
        }
        Ok(())
    }

    /// Joint alpha, defaulting when the joint loss is requested from flags.
    pub fn use_student_loss(&mut self, loss: LossKind, alpha: Option<f64>) {
        self.students.loss = loss;
        self.students.alpha = match loss {
            LossKind::DistillJoint => alpha.or(self.students.alpha).or(Some(DEFAULT_ALPHA)),
            _ => None,
        };
    }
}
