use candle_core::{backprop::GradStore, DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule as a function of the optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from 0 to the base rate over `warmup_steps`, then flat.
    LinearWarmup { warmup_steps: usize },
    /// Multiply the base rate by `factor` at each milestone step.
    Staged { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::LinearWarmup { warmup_steps } => {
                if *warmup_steps == 0 {
                    base
                } else {
                    base * ((step + 1) as f64 / *warmup_steps as f64).min(1.0)
                }
            }
            LrSchedule::Staged { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| step >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: Some(1.0) }
    }
}

/// Adam with explicit, checkpointable moment buffers.
pub struct Adam {
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
    config: AdamConfig,
    schedule: LrSchedule,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig, schedule: LrSchedule) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self { vars, first, second, step: 0, config, schedule })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.rate(self.config.lr, self.step)
    }

    /// Runs backprop from `loss` and applies one update. Returns the
    /// pre-clipping gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        let mut present = Vec::with_capacity(self.vars.len());
        for var in &self.vars {
            // Detached so the moment buffers do not keep this step's graph alive.
            let g = grads.get(var.as_tensor()).map(Tensor::detach);
            if let Some(g) = &g {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
            present.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm at step {}", self.step)));
        }
        let scale = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = &present[i] else { continue };
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g.clone() };
            let m = ((&self.first[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let denom = ((&v / bias2)?.sqrt()? + c.eps)?;
            let update = ((&m / bias1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(norm)
    }

    /// Moment buffers and step counter, for resumable checkpoints.
    pub fn state(&self) -> (usize, Vec<Tensor>, Vec<Tensor>) {
        (self.step, self.first.clone(), self.second.clone())
    }

    pub fn restore(&mut self, step: usize, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        if first.len() != self.vars.len() || second.len() != self.vars.len() {
            return Err(Error::invalid("optimizer state does not match parameter count"));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}
