use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Update rule. Defaults follow DCGAN (Adam) and WGAN (RMSProp) practice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
    Rmsprop { alpha: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::Rmsprop {
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f32,
    /// Element-wise clamp bound applied after every update.
    #[serde(default)]
    pub clip: Option<f32>,
}

impl OptimizerConfig {
    /// Adam, lr 2e-4, betas (0.5, 0.999).
    pub fn gan_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::adam(),
            lr: 2e-4,
            clip: None,
        }
    }

    /// Adam at lr 5e-3 for the student's regression onto teacher outputs.
    pub fn distill_default() -> Self {
        OptimizerConfig {
            lr: 5e-3,
            ..Self::gan_default()
        }
    }

    /// RMSProp, lr 5e-5, weights clipped to 0.01.
    pub fn wgan_critic_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::rmsprop(),
            lr: 5e-5,
            clip: Some(0.01),
        }
    }

    pub fn wgan_generator_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::rmsprop(),
            lr: 5e-5,
            clip: None,
        }
    }

    pub fn build(self) -> OptimizerState {
        OptimizerState::new(self)
    }
}

/// Optimizer plus its per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of completed updates.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn ensure_buffers(&mut self, params: &[Tensor<f32>]) -> Result<()> {
        let want_first = matches!(self.config.kind, OptimizerKind::Adam { .. });
        let want_second = !matches!(self.config.kind, OptimizerKind::Sgd);
        if self.steps == 0 && self.second.is_empty() {
            if want_first {
                self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
            if want_second {
                self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
        }
        let bufs = if want_second { &self.second } else { return Ok(()) };
        if bufs.len() != params.len() || bufs.iter().zip(params).any(|(b, p)| b.len() != p.numel()) {
            return Err(Error::Contract(
                "optimizer moment buffers do not match the parameter set".into(),
            ));
        }
        Ok(())
    }

    /// Apply one update from each parameter's gradient, clamp if a clip bound is
    /// set, then clear the gradients.
    pub fn step(&mut self, params: &mut [Tensor<f32>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Contract(format!(
                "parameter {i} has no gradient at optimizer step"
            )));
        }
        self.ensure_buffers(params)?;
        self.steps += 1;
        let lr = self.config.lr;
        let t = self.steps as i32;
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.take_grad().expect("checked above");
            let data = p.data_mut();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    data.iter_mut().zip(&g).for_each(|(w, &gv)| *w -= lr * gv);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - (beta1 as f64).powi(t);
                    let bc2 = 1.0 - (beta2 as f64).powi(t);
                    let step = (lr as f64 / bc1) as f32;
                    let bc2_sqrt = bc2.sqrt() as f32;
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for k in 0..data.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        data[k] -= step * m[k] / (v[k].sqrt() / bc2_sqrt + eps);
                    }
                }
                OptimizerKind::Rmsprop { alpha, eps } => {
                    let v = &mut self.second[i];
                    for k in 0..data.len() {
                        v[k] = alpha * v[k] + (1.0 - alpha) * g[k] * g[k];
                        data[k] -= lr * g[k] / (v[k].sqrt() + eps);
                    }
                }
            }
            if let Some(c) = self.config.clip {
                data.iter_mut().for_each(|w| *w = w.clamp(-c, c));
            }
            if data.iter().any(|w| !w.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {i} became non-finite after update {}",
                    self.steps
                )));
            }
        }
        Ok(())
    }
}
