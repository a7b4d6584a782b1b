use mabvit_tensor::TensorError;

use crate::error::Result;
use crate::harness::config::{OptimizerKind, TrainRunConfig};
use crate::model::{decays, ModelParams};

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainRunConfig) -> f64 {
    let (warm, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    if total <= warm {
        return cfg.base_lr;
    }
    let t = (step.min(total) - warm) as f64 / (total - warm) as f64;
    cfg.base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment buffers (the SGD momentum buffer reuses `m`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParamState {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

fn check_lengths(p: &[f64], g: &[f64], s: &ParamState) -> Result<()> {
    if g.len() != p.len() || s.m.len() != p.len() || s.v.len() != p.len() {
        return Err(TensorError::ShapeMismatch {
            op: "optimizer_step",
            lhs: vec![p.len()],
            rhs: vec![g.len(), s.m.len(), s.v.len()],
        }
        .into());
    }
    Ok(())
}

/// One AdamW update at 1-based `step`. Weight decay is decoupled: the
/// parameter is first scaled by `1 - lr * wd` (when `decay`), then the
/// bias-corrected adaptive step is subtracted.
pub fn adamw_step(p: &mut [f64], g: &[f64], state: &mut ParamState, hp: &AdamHyper, step: usize, decay: bool) -> Result<()> {
    check_lengths(p, g, state)?;
    let t = step.max(1) as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let shrink = if decay { 1.0 - hp.lr * hp.weight_decay } else { 1.0 };
    for i in 0..p.len() {
        let m = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g[i];
        let v = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        state.m[i] = m;
        state.v[i] = v;
        p[i] *= shrink;
        p[i] -= hp.lr * (m / c1) / ((v / c2).sqrt() + hp.eps);
    }
    Ok(())
}

/// SGD with momentum buffer `m <- momentum * m + g` and decoupled decay.
pub fn sgd_step(p: &mut [f64], g: &[f64], state: &mut ParamState, lr: f64, momentum: f64, weight_decay: f64, decay: bool) -> Result<()> {
    check_lengths(p, g, state)?;
    let shrink = if decay { 1.0 - lr * weight_decay } else { 1.0 };
    for i in 0..p.len() {
        state.m[i] = momentum * state.m[i] + g[i];
        p[i] *= shrink;
        p[i] -= lr * state.m[i];
    }
    Ok(())
}

/// Optimizer over a whole model, with per-tensor state in
/// [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub states: Vec<ParamState>,
    pub step: usize,
}

impl Optimizer {
    pub fn new(cfg: &TrainRunConfig, params: &ModelParams) -> Self {
        Self {
            kind: cfg.optimizer,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            states: params.named().iter().map(|(_, t)| ParamState::zeros(t.numel())).collect(),
            step: 0,
        }
    }

    /// Applies one update from the gradients currently stored on `params`
    /// and replaces each tensor with a fresh leaf holding the new values.
    pub fn step(&mut self, params: &mut ModelParams, lr: f64) -> Result<()> {
        self.step += 1;
        let hp = AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        };
        for ((name, slot), state) in params.named_mut().into_iter().zip(&mut self.states) {
            let mut p = slot.data().to_vec();
            let g = slot.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            let decay = decays(&name);
            match self.kind {
                OptimizerKind::AdamW => adamw_step(&mut p, &g, state, &hp, self.step, decay)?,
                OptimizerKind::Sgd => sgd_step(&mut p, &g, state, lr, self.momentum, self.weight_decay, decay)?,
            }
            *slot = slot.with_data(p)?;
        }
        Ok(())
    }
}
